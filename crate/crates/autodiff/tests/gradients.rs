//! Finite-difference checks for every differentiable primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenparse_autodiff::{
    grad_check, AutodiffError, Graph, ParamId, ParamStore, Result, SegmentPair, Tensor, Var,
};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Contracts an arbitrary output with fixed random weights so every output
/// entry contributes a distinct gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, shape[0], shape[1]));
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

fn check<F>(name: &str, shapes: &[(usize, usize)], mut f: F)
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| store.add(format!("in{i}"), random(&mut rng, r, c)))
        .collect();
    let report = grad_check(&mut store, STEP, 1.0, 1, &mut rng, |g, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let out = f(g, &vars)?;
        project(g, out, 99)
    })
    .unwrap();
    assert!(
        report.max_relative_error < TOL,
        "{name}: max relative error {} at {:?}",
        report.max_relative_error,
        report.worst
    );
}

#[test]
fn matmul() {
    check("matmul", &[(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1]));
    check("matmul_nt", &[(3, 4), (5, 4)], |g, v| g.matmul_nt(v[0], v[1]));
}

#[test]
fn add_sub_mul_scale() {
    check("add", &[(2, 3), (2, 3)], |g, v| g.add(v[0], v[1]));
    check("add_row", &[(4, 3), (1, 3)], |g, v| g.add(v[0], v[1]));
    check("sub", &[(2, 3), (2, 3)], |g, v| g.sub(v[0], v[1]));
    check("mul", &[(2, 3), (2, 3)], |g, v| g.mul(v[0], v[1]));
    check("scale", &[(2, 3)], |g, v| Ok(g.scale(v[0], -1.7)));
}

#[test]
fn concat_and_gather() {
    check("concat_cols", &[(2, 3), (2, 1)], |g, v| g.concat_cols(&[v[0], v[1]]));
    check("concat_rows", &[(2, 3), (1, 3)], |g, v| g.concat_rows(&[v[0], v[1]]));
    check("row_gather", &[(4, 3)], |g, v| g.row_gather(v[0], &[2, 0, 2, 3]));
    check("pick", &[(3, 3)], |g, v| g.pick(v[0], &[(0, 1), (2, 2), (0, 1)]));
}

#[test]
fn pooling_and_activations() {
    check("mean_pool", &[(5, 3)], |g, v| g.mean_pool(v[0], &[0..2, 2..5, 1..4]));
    check("tanh", &[(3, 3)], |g, v| Ok(g.tanh(v[0])));
    check("gelu", &[(3, 3)], |g, v| Ok(g.gelu(v[0])));
    check("layer_norm", &[(3, 5), (1, 5), (1, 5)], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
}

#[test]
fn normalizers() {
    check("softmax", &[(3, 4)], |g, v| Ok(g.softmax(v[0])));
    check("log_softmax", &[(3, 4)], |g, v| Ok(g.log_softmax(v[0])));
    check("logsumexp", &[(3, 4)], |g, v| Ok(g.logsumexp(v[0])));
    check("masked_fill", &[(2, 3)], |g, v| {
        let m = g.masked_fill(v[0], &[false, true, false, false, false, true], -1e30)?;
        Ok(g.logsumexp(m))
    });
    check("sum_all", &[(2, 3)], |g, v| Ok(g.sum_all(v[0])));
    check("mean_all", &[(2, 3)], |g, v| g.mean_all(v[0]));
}

#[test]
fn cross_entropy() {
    check("ce", &[(3, 5)], |g, v| {
        g.cross_entropy_with_label_smoothing(v[0], &[1, 4, 0], None, 0.2)
    });
    let valid: Vec<bool> = (0..15).map(|i| i % 5 != 3).collect();
    check("ce_masked", &[(3, 5)], |g, v| {
        g.cross_entropy_with_label_smoothing(v[0], &[1, 4, 0], Some(&valid), 0.2)
    });
}

#[test]
fn attention() {
    let segments = vec![
        SegmentPair {
            query: 0..3,
            key: 0..2,
        },
        SegmentPair {
            query: 3..5,
            key: 2..6,
        },
    ];
    check("attention", &[(5, 4), (6, 4), (6, 4)], |g, v| {
        g.attention(v[0], v[1], v[2], 2, &segments)
    });
    let self_segments = vec![SegmentPair {
        query: 0..4,
        key: 0..4,
    }];
    check("self_attention", &[(4, 4)], |g, v| {
        g.attention(v[0], v[0], v[0], 2, &self_segments)
    });
}

#[test]
fn linear_layer_with_cross_entropy_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, 6, 4));
    let b = store.add("b", random(&mut rng, 1, 4));
    let x = random(&mut rng, 8, 6);
    let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..4)).collect();
    let report = grad_check(&mut store, STEP, 1.0, 1, &mut rng, |g, s| {
        let xv = g.constant(x.clone());
        let (wv, bv) = (g.param(s, w), g.param(s, b));
        let h = g.matmul(xv, wv)?;
        let logits = g.add(h, bv)?;
        let ce = g.cross_entropy_with_label_smoothing(logits, &targets, None, 0.0)?;
        g.mean_all(ce)
    })
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, 3, 3));
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let zero = g.scale(wv, 0.0);
    let loss = g.sum_all(zero);
    let grads = g.backward(loss).unwrap().param_grads(store.len());
    assert!(grads[0].as_ref().unwrap().data().iter().all(|&x| x == 0.0));

    let report = grad_check(&mut store, STEP, 1.0, 1, &mut rng, |g, s| {
        let wv = g.param(s, w);
        let z = g.scale(wv, 0.0);
        Ok(g.sum_all(z))
    })
    .unwrap();
    assert_eq!(report.max_relative_error, 0.0);
}

/// Debug builds trip the forward finiteness assertion first.
#[test]
#[cfg_attr(debug_assertions, should_panic(expected = "non-finite"))]
fn non_finite_loss_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(1.0));
    let err = grad_check(&mut store, STEP, 1.0, 1, &mut rng, |g, s| {
        let wv = g.param(s, w);
        Ok(g.scale(wv, f64::INFINITY))
    });
    assert!(matches!(err, Err(AutodiffError::NonFinite(_))));
}
