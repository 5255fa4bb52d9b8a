use proptest::prelude::*;
use scenparse_autodiff::kernels::{gemm, log_sum_exp};
use scenparse_autodiff::{Graph, Tensor};

fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
}

fn gemm_case() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..7, 1usize..7, 1usize..7)
        .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), matrix(m, k), matrix(k, n), matrix(m, n)))
}

proptest! {
    #[test]
    fn gemm_matches_naive_product_in_every_layout((m, k, n, a, b, c0) in gemm_case()) {
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (a_trans, b_trans) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if a_trans { &at } else { &a };
            let bb = if b_trans { &bt } else { &b };
            let mut c = vec![f64::NAN; m * n];
            gemm(m, k, n, aa, a_trans, bb, b_trans, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let mut acc = c0.clone();
            gemm(m, k, n, aa, a_trans, bb, b_trans, &mut acc, true);
            for ((x, y), z) in acc.iter().zip(&want).zip(&c0) {
                prop_assert!((x - (y + z)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..6, seed in matrix(5, 6)) {
        let x = Tensor::new(vec![rows, cols], seed[..rows * cols].iter().map(|v| v * 100.0).collect()).unwrap();
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let s = g.softmax(v);
        let ls = g.log_softmax(v);
        for r in 0..rows {
            let p = g.value(s).row(r);
            prop_assert!(p.iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(log_sum_exp(g.value(ls).row(r)).abs() < 1e-9);
            let shifted: Vec<f64> = x.row(r).iter().map(|v| v + 1e3).collect();
            prop_assert!((log_sum_exp(&shifted) - log_sum_exp(x.row(r)) - 1e3).abs() < 1e-9);
        }
    }
}
