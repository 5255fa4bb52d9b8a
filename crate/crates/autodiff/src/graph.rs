//! Tape of recorded operations and the reverse pass over it.
//!
//! Nodes are appended in creation order, which is already a topological order;
//! [`Graph::backward`] walks them once in reverse.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, SegmentPair};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowGather(Var, Vec<usize>),
    MeanPool(Var, Vec<Range<usize>>),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    MaskedFill(Var, Vec<bool>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        valid: Option<Vec<bool>>,
        alpha: f64,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<SegmentPair>,
        probs: Vec<f64>,
    },
    Pick(Var, Vec<(usize, usize)>),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward computation recorded for differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it influenced the loss.
    pub fn of(&self, var: Var) -> Option<&Tensor> {
        self.nodes[var.0].as_ref()
    }

    /// Per-parameter gradients indexed by `ParamId`; `None` when unused.
    pub fn param_grads(&self, store_len: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store_len];
        for &(id, var) in &self.params {
            out[id.0] = self.nodes[var.0].clone();
        }
        out
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value in {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients (not tied to a parameter store).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    /// Elementwise sum; `b` may also be a `[1, n]` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let t = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(t, Op::Add(a, b), ng));
        }
        if tb.rows() == 1 && tb.cols() == ta.cols() {
            let mut t = ta.clone();
            let n = tb.cols();
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += tb.data()[i % n];
            }
            return Ok(self.push(t, Op::AddRow(a, b), ng));
        }
        Err(mismatch("add", ta, tb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("sub", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        for p in parts {
            if self.value(*p).cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), self.value(*p)));
            }
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Selects rows of `a` by index (embedding lookup).
    pub fn row_gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= ta.rows() {
                return Err(invalid(
                    "row_gather",
                    format!("row {r} out of range for shape {:?}", ta.shape()),
                ));
            }
            data.extend_from_slice(ta.row(r));
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![rows.len(), cols], data)?,
            Op::RowGather(a, rows.to_vec()),
            ng,
        ))
    }

    /// Averages each contiguous row segment, producing one row per segment.
    pub fn mean_pool(&mut self, a: Var, segments: &[Range<usize>]) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = vec![0.0; segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.end > ta.rows() {
                return Err(invalid(
                    "mean_pool",
                    format!("bad segment {seg:?} for shape {:?}", ta.shape()),
                ));
            }
            let out = &mut data[s * cols..(s + 1) * cols];
            for r in seg.clone() {
                for (o, x) in out.iter_mut().zip(ta.row(r)) {
                    *o += x;
                }
            }
            let inv = 1.0 / seg.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![segments.len(), cols], data)?,
            Op::MeanPool(a, segments.to_vec()),
            ng,
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.tanh()).collect())
            .expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| kernels::gelu(x)).collect(),
        )
        .expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.shape() != [1, n] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [1, n] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let mut normalized = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; tx.rows()];
        let mut out = vec![0.0; tx.len()];
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let xh = (row[c] - mean) * is;
                normalized[r * n + c] = xh;
                out[r * n + c] = xh * tg.data()[c] + tb.data()[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        self.push(t, Op::LogSoftmax(a), ng)
    }

    /// Row-wise log-sum-exp, `[m, n] -> [m, 1]`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = (0..ta.rows()).map(|r| kernels::log_sum_exp(ta.row(r))).collect();
        let t = Tensor::new(vec![ta.rows(), 1], data).expect("shape");
        let ng = self.ng(a);
        self.push(t, Op::LogSumExp(a), ng)
    }

    /// Replaces entries where `mask` is true with `value`; those entries get no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_fill",
                left: ta.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut t = ta.clone();
        for (x, &m) in t.data_mut().iter_mut().zip(mask) {
            if m {
                *x = value;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(t, Op::MaskedFill(a, mask.to_vec()), ng))
    }

    /// Per-row cross-entropy with an additive uniform label-smoothing term.
    ///
    /// For row `r` with target `y` and valid positions `V`:
    /// `-log p_y - alpha * mean_{j in V} log p_j`, where `p` is the softmax over
    /// `V` only. Returns `[m, 1]`.
    pub fn cross_entropy_with_label_smoothing(
        &mut self,
        logits: Var,
        targets: &[usize],
        valid: Option<&[bool]>,
        alpha: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (m, n) = (tl.rows(), tl.cols());
        if targets.len() != m {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(v) = valid {
            if v.len() != m * n {
                return Err(invalid("cross_entropy", "valid mask has wrong length"));
            }
        }
        let is_valid = |r: usize, c: usize| valid.is_none_or(|v| v[r * n + c]);
        let mut probs = vec![0.0; m * n];
        let mut out = vec![0.0; m];
        for r in 0..m {
            let y = targets[r];
            if y >= n || !is_valid(r, y) {
                return Err(invalid(
                    "cross_entropy",
                    format!("target {y} invalid for row {r}"),
                ));
            }
            let row = tl.row(r);
            let vals: Vec<f64> = (0..n).filter(|&c| is_valid(r, c)).map(|c| row[c]).collect();
            let lse = kernels::log_sum_exp(&vals);
            let nv = vals.len() as f64;
            let mut sum_lp = 0.0;
            for c in 0..n {
                if is_valid(r, c) {
                    let lp = row[c] - lse;
                    sum_lp += lp;
                    probs[r * n + c] = lp.exp();
                }
            }
            out[r] = -(row[y] - lse) - alpha * sum_lp / nv;
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::new(vec![m, 1], out)?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid: valid.map(<[bool]>::to_vec),
                alpha,
                probs,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over segment pairs.
    ///
    /// Rows of `q` in `segments[i].query` attend only to rows of `k`/`v` in
    /// `segments[i].key`. Query rows outside every segment produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[SegmentPair],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let width = tq.cols();
        if tk.cols() != width {
            return Err(mismatch("attention", tq, tk));
        }
        if tv.shape() != tk.shape() {
            return Err(mismatch("attention", tk, tv));
        }
        if heads == 0 || width % heads != 0 {
            return Err(invalid(
                "attention",
                format!("width {width} not divisible by {heads} heads"),
            ));
        }
        for s in segments {
            if s.query.end > tq.rows() || s.key.end > tk.rows() || s.key.is_empty() {
                return Err(invalid("attention", format!("bad segment {s:?}")));
            }
        }
        let (out, probs) = kernels::attention_forward(
            tq.data(),
            tk.data(),
            tv.data(),
            tq.rows(),
            width,
            heads,
            segments,
        );
        let t = Tensor::new(vec![tq.rows(), width], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Gathers single elements into an `[n, 1]` column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= ta.rows() || c >= ta.cols() {
                return Err(invalid(
                    "pick",
                    format!("({r}, {c}) out of range for {:?}", ta.shape()),
                ));
            }
            data.push(ta.get(r, c));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![at.len(), 1], data)?, Op::Pick(a, at.to_vec()), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(invalid("mean_all", "empty tensor"));
        }
        let s = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a), ng))
    }

    /// Reverse pass from a `[1, 1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            nodes: grads,
            params: self.param_order.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.ng(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape_of = |v: Var| self.value(v).shape().to_vec();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, tb.data(), false, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g.data(), true, ta.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(vec![n, k], db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::row_vector(db));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let neg = g.data().iter().map(|x| -x).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), neg).unwrap());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(shape_of(*a), d).unwrap());
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(shape_of(*b), d).unwrap());
                }
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|x| x * c).collect();
                self.accumulate(grads, *a, Tensor::new(shape_of(*a), d).unwrap());
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.ng(*p) {
                        let mut d = Vec::with_capacity(g.rows() * cols);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, *p, Tensor::new(shape_of(*p), d).unwrap());
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.ng(*p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, *p, Tensor::new(shape_of(*p), d).unwrap());
                    }
                    offset += len;
                }
            }
            Op::RowGather(a, rows) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (x, y) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanPool(a, segments) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for (s, seg) in segments.iter().enumerate() {
                    let inv = 1.0 / seg.len() as f64;
                    for r in seg.clone() {
                        for (x, y) in d.row_mut(r).iter_mut().zip(g.row(s)) {
                            *x += y * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gy, y)| gy * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(shape_of(*a), d).unwrap());
            }
            Op::Gelu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gy, &x)| gy * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(shape_of(*a), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let (m, n) = (g.rows(), g.cols());
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g.get(r, c) * normalized[r * n + c];
                            db[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::row_vector(dg));
                    self.accumulate(grads, *bias, Tensor::row_vector(db));
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for c in 0..n {
                            let dxh = g.get(r, c) * tg.data()[c];
                            sum += dxh;
                            sum_xh += dxh * normalized[r * n + c];
                        }
                        for c in 0..n {
                            let dxh = g.get(r, c) * tg.data()[c];
                            dx[r * n + c] = inv_std[r] / nf
                                * (nf * dxh - sum - normalized[r * n + c] * sum_xh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![m, n], dx).unwrap());
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - inner));
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for c in 0..y.cols() {
                        d.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSumExp(a) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    let lse = node.value.get(r, 0);
                    let gy = g.get(r, 0);
                    for c in 0..ta.cols() {
                        d.set(r, c, gy * (ta.get(r, c) - lse).exp());
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::MaskedFill(a, mask) => {
                let d = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(x, &m)| if m { 0.0 } else { *x })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(shape_of(*a), d).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                valid,
                alpha,
                probs,
            } => {
                let tl = self.value(*logits);
                let (m, n) = (tl.rows(), tl.cols());
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let gy = g.get(r, 0);
                    let row_valid = |c: usize| valid.as_ref().is_none_or(|v| v[r * n + c]);
                    let nv = (0..n).filter(|&c| row_valid(c)).count() as f64;
                    for c in 0..n {
                        if !row_valid(c) {
                            continue;
                        }
                        let p = probs[r * n + c];
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        d[r * n + c] = gy * ((1.0 + alpha) * p - onehot - alpha / nv);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![m, n], d).unwrap());
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = kernels::attention_backward(
                    tq.data(),
                    tk.data(),
                    tv.data(),
                    probs,
                    g.data(),
                    tq.cols(),
                    *heads,
                    segments,
                );
                self.accumulate(grads, *q, Tensor::new(shape_of(*q), dq).unwrap());
                self.accumulate(grads, *k, Tensor::new(shape_of(*k), dk).unwrap());
                self.accumulate(grads, *v, Tensor::new(shape_of(*v), dv).unwrap());
            }
            Op::Pick(a, at) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for (i, &(r, c)) in at.iter().enumerate() {
                    d.set(r, c, d.get(r, c) + g.get(i, 0));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(ta.rows(), ta.cols(), g.item()));
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let v = g.item() / ta.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(ta.rows(), ta.cols(), v));
            }
        }
    }
}
