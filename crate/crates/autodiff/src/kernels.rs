//! Dense numeric kernels shared by the forward and backward passes.

use std::ops::Range;

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), row-major.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly the row-major (or transposed) layout of each buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A query block attending to a key/value block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPair {
    pub query: Range<usize>,
    pub key: Range<usize>,
}

/// Multi-head scaled dot-product attention restricted to segment pairs.
///
/// Returns the output `[nq, width]` and the attention probabilities of every
/// (segment, head) block, concatenated in iteration order.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    width: usize,
    heads: usize,
    segments: &[SegmentPair],
) -> (Vec<f64>, Vec<f64>) {
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; nq * width];
    let mut probs = Vec::new();
    for seg in segments {
        let tk = seg.key.len();
        for head in 0..heads {
            let off = head * hd;
            for qi in seg.query.clone() {
                let qrow = &q[qi * width + off..qi * width + off + hd];
                let start = probs.len();
                let mut max = f64::NEG_INFINITY;
                for ki in seg.key.clone() {
                    let krow = &k[ki * width + off..ki * width + off + hd];
                    let s = dot(qrow, krow) * scale;
                    max = max.max(s);
                    probs.push(s);
                }
                let mut sum = 0.0;
                for p in &mut probs[start..start + tk] {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                for p in &mut probs[start..start + tk] {
                    *p /= sum;
                }
                let orow = &mut out[qi * width + off..qi * width + off + hd];
                for (j, ki) in seg.key.clone().enumerate() {
                    let p = probs[start + j];
                    let vrow = &v[ki * width + off..ki * width + off + hd];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to q, k and v.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d_out: &[f64],
    width: usize,
    heads: usize,
    segments: &[SegmentPair],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut cursor = 0;
    let mut dp = Vec::new();
    for seg in segments {
        let tk = seg.key.len();
        for head in 0..heads {
            let off = head * hd;
            for qi in seg.query.clone() {
                let p = &probs[cursor..cursor + tk];
                cursor += tk;
                let dorow = &d_out[qi * width + off..qi * width + off + hd];
                dp.clear();
                for (j, ki) in seg.key.clone().enumerate() {
                    let vrow = &v[ki * width + off..ki * width + off + hd];
                    dp.push(dot(dorow, vrow));
                    let dvrow = &mut dv[ki * width + off..ki * width + off + hd];
                    for (d, g) in dvrow.iter_mut().zip(dorow) {
                        *d += p[j] * g;
                    }
                }
                let inner: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                for (j, ki) in seg.key.clone().enumerate() {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..hd {
                        dq[qi * width + off + t] += ds * k[ki * width + off + t];
                        dk[ki * width + off + t] += ds * q[qi * width + off + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `ln(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}
