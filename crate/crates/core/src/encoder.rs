//! Small pre-LN transformer encoder with a pooled projection head.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use scenparse_autodiff::{Graph, ParamId, ParamStore, SegmentPair, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub norm: LayerNormParams,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForwardParams {
    pub norm: LayerNormParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub pooling: Pooling,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: Option<LayerNormParams>,
    pub projection: ParamId,
}

pub(crate) fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

pub(crate) fn init_layer_norm(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
) -> LayerNormParams {
    LayerNormParams {
        gain: store.add(format!("{prefix}.gain"), Tensor::filled(1, width, 1.0)),
        bias: store.add(format!("{prefix}.bias"), Tensor::zeros(1, width)),
    }
}

pub(crate) fn init_attention(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    width: usize,
) -> AttentionParams {
    let std = 1.0 / (width as f64).sqrt();
    AttentionParams {
        norm: init_layer_norm(store, &format!("{prefix}.norm"), width),
        wq: store.add(format!("{prefix}.wq"), normal(rng, width, width, std)),
        wk: store.add(format!("{prefix}.wk"), normal(rng, width, width, std)),
        wv: store.add(format!("{prefix}.wv"), normal(rng, width, width, std)),
        wo: store.add(format!("{prefix}.wo"), normal(rng, width, width, std)),
    }
}

pub(crate) fn init_ffn(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    width: usize,
    inner: usize,
) -> FeedForwardParams {
    FeedForwardParams {
        norm: init_layer_norm(store, &format!("{prefix}.norm"), width),
        w1: store.add(
            format!("{prefix}.w1"),
            normal(rng, width, inner, 1.0 / (width as f64).sqrt()),
        ),
        b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, inner)),
        w2: store.add(
            format!("{prefix}.w2"),
            normal(rng, inner, width, 1.0 / (inner as f64).sqrt()),
        ),
        b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, width)),
    }
}

impl EncoderParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        dims: EncoderDims,
        pooling: Pooling,
    ) -> Self {
        let h = dims.hidden;
        let tokens = store.add(format!("{prefix}.tokens"), normal(rng, dims.vocab, h, 0.1));
        let positions = store.add(
            format!("{prefix}.positions"),
            normal(rng, dims.max_positions, h, 0.1),
        );
        let blocks = (0..dims.layers)
            .map(|l| EncoderBlock {
                attn: init_attention(store, rng, &format!("{prefix}.block{l}.attn"), h),
                ffn: init_ffn(store, rng, &format!("{prefix}.block{l}.ffn"), h, dims.ffn),
            })
            .collect();
        let final_norm =
            (dims.layers > 0).then(|| init_layer_norm(store, &format!("{prefix}.final_norm"), h));
        let projection = store.add(
            format!("{prefix}.projection"),
            normal(rng, h, dims.out_dim, 1.0 / (h as f64).sqrt()),
        );
        Self {
            dims,
            pooling,
            tokens,
            positions,
            blocks,
            final_norm,
            projection,
        }
    }
}

/// Output of encoding a batch of sequences packed row-wise.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[n_sequences, out_dim]`
    pub pooled: Var,
    /// `[total_tokens, hidden]`
    pub states: Var,
    pub segments: Vec<Range<usize>>,
}

pub(crate) fn layer_norm(
    g: &mut Graph,
    store: &ParamStore,
    p: &LayerNormParams,
    x: Var,
) -> Result<Var> {
    let gain = g.param(store, p.gain);
    let bias = g.param(store, p.bias);
    Ok(g.layer_norm(x, gain, bias)?)
}

/// `x + Attn(LN(x), memory)`; self-attention when `memory` is `None`.
pub(crate) fn attention_residual(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    heads: usize,
    x: Var,
    memory: Option<Var>,
    segments: &[SegmentPair],
) -> Result<Var> {
    let normed = layer_norm(g, store, &p.norm, x)?;
    let kv_src = memory.unwrap_or(normed);
    let (wq, wk, wv, wo) = (
        g.param(store, p.wq),
        g.param(store, p.wk),
        g.param(store, p.wv),
        g.param(store, p.wo),
    );
    let q = g.matmul(normed, wq)?;
    let k = g.matmul(kv_src, wk)?;
    let v = g.matmul(kv_src, wv)?;
    let attended = g.attention(q, k, v, heads, segments)?;
    let out = g.matmul(attended, wo)?;
    Ok(g.add(x, out)?)
}

pub(crate) fn ffn_residual(
    g: &mut Graph,
    store: &ParamStore,
    p: &FeedForwardParams,
    x: Var,
) -> Result<Var> {
    let normed = layer_norm(g, store, &p.norm, x)?;
    let (w1, b1, w2, b2) = (
        g.param(store, p.w1),
        g.param(store, p.b1),
        g.param(store, p.w2),
        g.param(store, p.b2),
    );
    let h = g.matmul(normed, w1)?;
    let h = g.add(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    let h = g.add(h, b2)?;
    Ok(g.add(x, h)?)
}

/// Position ids `0..len` for each segment, concatenated.
pub(crate) fn position_ids(segments: &[Range<usize>]) -> Vec<usize> {
    segments.iter().flat_map(|s| 0..s.len()).collect()
}

pub(crate) fn self_segments(segments: &[Range<usize>]) -> Vec<SegmentPair> {
    segments
        .iter()
        .map(|s| SegmentPair {
            query: s.clone(),
            key: s.clone(),
        })
        .collect()
}

/// Encodes token-id sequences into pooled vectors and per-token states.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    params: &EncoderParams,
    sequences: &[Vec<usize>],
) -> Result<Encoded> {
    let dims = params.dims;
    if sequences.is_empty() {
        return Err(Error::Config("encode called with no sequences".into()));
    }
    let mut segments = Vec::with_capacity(sequences.len());
    let mut ids = Vec::new();
    for seq in sequences {
        if seq.is_empty() {
            return Err(Error::EmptyUtterance);
        }
        if seq.len() > dims.max_positions {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds max_positions {}",
                seq.len(),
                dims.max_positions
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= dims.vocab) {
            return Err(Error::Config(format!("token id {bad} outside vocabulary")));
        }
        segments.push(ids.len()..ids.len() + seq.len());
        ids.extend_from_slice(seq);
    }
    let tok_table = g.param(store, params.tokens);
    let pos_table = g.param(store, params.positions);
    let tok = g.row_gather(tok_table, &ids)?;
    let pos = g.row_gather(pos_table, &position_ids(&segments))?;
    let mut x = g.add(tok, pos)?;
    let attn_segments = self_segments(&segments);
    for block in &params.blocks {
        x = attention_residual(g, store, &block.attn, dims.heads, x, None, &attn_segments)?;
        x = ffn_residual(g, store, &block.ffn, x)?;
    }
    if let Some(norm) = &params.final_norm {
        x = layer_norm(g, store, norm, x)?;
    }
    let pooled_states = match params.pooling {
        Pooling::Mean => g.mean_pool(x, &segments)?,
        Pooling::First => {
            let firsts: Vec<usize> = segments.iter().map(|s| s.start).collect();
            g.row_gather(x, &firsts)?
        }
    };
    let proj = g.param(store, params.projection);
    let pooled = g.matmul(pooled_states, proj)?;
    Ok(Encoded {
        pooled,
        states: x,
        segments,
    })
}
