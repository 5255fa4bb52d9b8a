//! Non-autoregressive span-pointer decoder that fills scenario variables.

use std::ops::Range;

use rand::Rng;
use scenparse_autodiff::{Graph, ParamId, ParamStore, SegmentPair, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{
    attention_residual, ffn_residual, init_attention, init_ffn, init_layer_norm, layer_norm,
    normal, position_ids, self_segments, AttentionParams, FeedForwardParams, LayerNormParams,
};
use crate::error::{Error, Result};
use crate::frame::{Frame, Node, Scenario, Span, Utterance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillerParams {
    pub hidden: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub positions: ParamId,
    /// Scenario-token embeddings learned from scratch; used only without fusion.
    pub scenario_tokens: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: LayerNormParams,
    pub start_head: ParamId,
    pub end_head: ParamId,
}

impl FillerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        vocab: usize,
        hidden: usize,
        heads: usize,
        ffn: usize,
        layers: usize,
        max_positions: usize,
    ) -> Self {
        let std = 1.0 / (hidden as f64).sqrt();
        let positions = store.add("filler.positions", normal(rng, max_positions, hidden, 0.1));
        let scenario_tokens = store.add("filler.scenario_tokens", normal(rng, vocab, hidden, 0.1));
        let blocks = (0..layers)
            .map(|l| DecoderBlock {
                self_attn: init_attention(store, rng, &format!("filler.block{l}.self"), hidden),
                cross_attn: init_attention(store, rng, &format!("filler.block{l}.cross"), hidden),
                ffn: init_ffn(store, rng, &format!("filler.block{l}.ffn"), hidden, ffn),
            })
            .collect();
        let final_norm = init_layer_norm(store, "filler.final_norm", hidden);
        let start_head = store.add("filler.start_head", normal(rng, hidden, hidden, std));
        let end_head = store.add("filler.end_head", normal(rng, hidden, hidden, std));
        Self {
            hidden,
            heads,
            max_positions,
            positions,
            scenario_tokens,
            blocks,
            final_norm,
            start_head,
            end_head,
        }
    }
}

/// Packed decoder input for a batch of (utterance, scenario) pairs.
#[derive(Debug, Clone)]
pub struct DecoderInput {
    pub embeddings: Var,
    pub segments: Vec<Range<usize>>,
}

/// Builds decoder inputs. With fusion, each scenario's rows are taken from
/// `states` (the scenario encoder's final token states); otherwise from the
/// filler's own token table. Positional embeddings are added either way.
pub fn fuse_scenario_embeddings(
    g: &mut Graph,
    store: &ParamStore,
    filler: &FillerParams,
    fusion: bool,
    token_ids: &[Vec<usize>],
    states: Option<(Var, &[Range<usize>])>,
) -> Result<DecoderInput> {
    let mut segments = Vec::with_capacity(token_ids.len());
    let mut offset = 0;
    for ids in token_ids {
        if ids.len() > filler.max_positions {
            return Err(Error::Config(format!(
                "scenario of {} tokens exceeds max_positions {}",
                ids.len(),
                filler.max_positions
            )));
        }
        segments.push(offset..offset + ids.len());
        offset += ids.len();
    }
    let base = if fusion {
        let (states, rows) = states.ok_or_else(|| {
            Error::MissingArtifact("scenario token states are required with fusion on".into())
        })?;
        if rows.len() != token_ids.len() {
            return Err(Error::Config(format!(
                "{} scenario state ranges for {} scenarios",
                rows.len(),
                token_ids.len()
            )));
        }
        let mut gather = Vec::with_capacity(offset);
        for (r, ids) in rows.iter().zip(token_ids) {
            if r.len() != ids.len() {
                return Err(Error::Config("scenario states do not match tokens".into()));
            }
            gather.extend(r.clone());
        }
        g.row_gather(states, &gather)?
    } else {
        let table = g.param(store, filler.scenario_tokens);
        let flat: Vec<usize> = token_ids.iter().flatten().copied().collect();
        g.row_gather(table, &flat)?
    };
    let pos_table = g.param(store, filler.positions);
    let pos = g.row_gather(pos_table, &position_ids(&segments))?;
    let embeddings = g.add(base, pos)?;
    Ok(DecoderInput {
        embeddings,
        segments,
    })
}

/// Start/end pointer scores for every variable of every example in a batch.
#[derive(Debug, Clone)]
pub struct PointerLogits {
    /// `[n_vars, total_utterance_tokens]`
    pub start: Var,
    pub end: Var,
    /// Row-major mask of columns inside each variable's own utterance.
    pub valid: Vec<bool>,
    /// `(example, variable)` for each row.
    pub owners: Vec<(usize, usize)>,
    pub utterance_segments: Vec<Range<usize>>,
}

/// One parallel decoder pass for all variables of all examples.
///
/// `var_positions[i]` are offsets into scenario `i` of the tokens whose
/// decoder states predict the spans of `x_1..x_m`.
pub fn decode_logits(
    g: &mut Graph,
    store: &ParamStore,
    filler: &FillerParams,
    input: &DecoderInput,
    utterance_states: Var,
    utterance_segments: &[Range<usize>],
    var_positions: &[Vec<usize>],
) -> Result<Option<PointerLogits>> {
    let n = input.segments.len();
    if utterance_segments.len() != n || var_positions.len() != n {
        return Err(Error::Config(
            "decoder batch has mismatched utterance, scenario and variable counts".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut owners = Vec::new();
    for (i, positions) in var_positions.iter().enumerate() {
        for (v, &p) in positions.iter().enumerate() {
            if p >= input.segments[i].len() {
                return Err(Error::Config(format!(
                    "variable position {p} outside scenario of length {}",
                    input.segments[i].len()
                )));
            }
            rows.push(input.segments[i].start + p);
            owners.push((i, v));
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }

    let self_segs = self_segments(&input.segments);
    let cross_segs: Vec<SegmentPair> = input
        .segments
        .iter()
        .zip(utterance_segments)
        .map(|(s, u)| SegmentPair {
            query: s.clone(),
            key: u.clone(),
        })
        .collect();
    let mut x = input.embeddings;
    for block in &filler.blocks {
        x = attention_residual(g, store, &block.self_attn, filler.heads, x, None, &self_segs)?;
        x = attention_residual(
            g,
            store,
            &block.cross_attn,
            filler.heads,
            x,
            Some(utterance_states),
            &cross_segs,
        )?;
        x = ffn_residual(g, store, &block.ffn, x)?;
    }
    x = layer_norm(g, store, &filler.final_norm, x)?;
    let var_states = g.row_gather(x, &rows)?;

    let scale = 1.0 / (filler.hidden as f64).sqrt();
    let mut pointer = |head: ParamId| -> Result<Var> {
        let w = g.param(store, head);
        let q = g.matmul(var_states, w)?;
        let scores = g.matmul_nt(q, utterance_states)?;
        Ok(g.scale(scores, scale))
    };
    let start = pointer(filler.start_head)?;
    let end = pointer(filler.end_head)?;

    let total = g.value(utterance_states).rows();
    let mut valid = vec![false; owners.len() * total];
    for (r, &(i, _)) in owners.iter().enumerate() {
        for c in utterance_segments[i].clone() {
            valid[r * total + c] = true;
        }
    }
    let masked_start = g.masked_fill(start, &invert(&valid), MASKED_SCORE)?;
    let masked_end = g.masked_fill(end, &invert(&valid), MASKED_SCORE)?;
    Ok(Some(PointerLogits {
        start: masked_start,
        end: masked_end,
        valid,
        owners,
        utterance_segments: utterance_segments.to_vec(),
    }))
}

const MASKED_SCORE: f64 = -1e30;

fn invert(mask: &[bool]) -> Vec<bool> {
    mask.iter().map(|m| !m).collect()
}

/// Mean over variables of start NLL + end NLL, each with additive uniform
/// label smoothing weighted by `alpha`. Gold spans are per example, in
/// variable order. Returns a scalar constant 0 when there are no variables.
pub fn loss_filling(
    g: &mut Graph,
    logits: Option<&PointerLogits>,
    gold: &[Vec<Span>],
    alpha: f64,
) -> Result<Var> {
    let Some(logits) = logits else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let mut starts = Vec::with_capacity(logits.owners.len());
    let mut ends = Vec::with_capacity(logits.owners.len());
    for &(i, v) in &logits.owners {
        let seg = logits
            .utterance_segments
            .get(i)
            .ok_or_else(|| Error::Span(format!("no utterance for example {i}")))?;
        let span = gold
            .get(i)
            .and_then(|s| s.get(v))
            .ok_or_else(|| Error::Span(format!("missing gold span for x{} of example {i}", v + 1)))?;
        if span.start >= span.end || span.end > seg.len() {
            return Err(Error::Span(format!(
                "gold span [{}, {}) invalid for utterance of {} tokens",
                span.start,
                span.end,
                seg.len()
            )));
        }
        starts.push(seg.start + span.start);
        ends.push(seg.start + span.end - 1);
    }
    let valid = Some(logits.valid.as_slice());
    let ls = g.cross_entropy_with_label_smoothing(logits.start, &starts, valid, alpha)?;
    let le = g.cross_entropy_with_label_smoothing(logits.end, &ends, valid, alpha)?;
    let both = g.add(ls, le)?;
    Ok(g.mean_all(both)?)
}

/// Decoded span for one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    pub span: Span,
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy start-first decoding; the end token is chosen at or after the start.
pub fn decode_spans(
    g: &Graph,
    logits: Option<&PointerLogits>,
    n_examples: usize,
) -> Vec<Vec<SpanPrediction>> {
    let mut out = vec![Vec::new(); n_examples];
    let Some(logits) = logits else {
        return out;
    };
    let start = g.value(logits.start);
    let end = g.value(logits.end);
    for (r, &(i, _)) in logits.owners.iter().enumerate() {
        let seg = logits.utterance_segments[i].clone();
        let s_scores = &start.row(r)[seg.clone()];
        let e_scores = &end.row(r)[seg];
        let s = argmax(s_scores);
        let e = s + argmax(&e_scores[s..]);
        out[i].push(SpanPrediction {
            start_probs: softmax(s_scores),
            end_probs: softmax(e_scores),
            span: Span::new(s, e + 1),
        });
    }
    out
}

/// Substitutes spans for the scenario's variables, in order.
pub fn fill(scenario: &Scenario, spans: &[Span], utt: &Utterance) -> Result<Frame> {
    let m = scenario.num_variables();
    if spans.len() != m {
        return Err(Error::Span(format!(
            "scenario has {m} variables but {} spans were given",
            spans.len()
        )));
    }
    for s in spans {
        if s.start >= s.end || s.end > utt.len() {
            return Err(Error::Span(format!(
                "span [{}, {}) outside utterance of {} tokens",
                s.start,
                s.end,
                utt.len()
            )));
        }
    }
    let root: Node<Span> = scenario.root().map_leaves(&mut |v| spans[v.0 - 1]);
    let frame = Frame { root };
    frame.validate(utt)?;
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{parse_scenario, serialize_frame};

    fn weather_utt() -> Utterance {
        Utterance::new("what's the weather in seattle tomorrow").unwrap()
    }

    #[test]
    fn fill_table_one() {
        let utt = Utterance::new("what's the weather in seattle").unwrap();
        let s = parse_scenario("[IN:GET_WEATHER [SL:LOCATION x1 ] ]").unwrap();
        let f = fill(&s, &[Span::new(4, 5)], &utt).unwrap();
        assert_eq!(
            serialize_frame(&f, &utt),
            "[IN:GET_WEATHER [SL:LOCATION seattle ] ]"
        );

        let utt = weather_utt();
        let s = parse_scenario("[IN:GET_WEATHER [SL:LOCATION x1 ] [SL:DATE_TIME x2 ] ]").unwrap();
        let f = fill(&s, &[Span::new(4, 5), Span::new(5, 6)], &utt).unwrap();
        assert_eq!(
            serialize_frame(&f, &utt),
            "[IN:GET_WEATHER [SL:LOCATION seattle ] [SL:DATE_TIME tomorrow ] ]"
        );
    }

    #[test]
    fn fill_leafless_and_mismatch() {
        let utt = weather_utt();
        let s = parse_scenario("[IN:NEGATION ]").unwrap();
        let f = fill(&s, &[], &utt).unwrap();
        assert_eq!(serialize_frame(&f, &utt), "[IN:NEGATION ]");
        assert!(matches!(fill(&s, &[Span::new(0, 1)], &utt), Err(Error::Span(_))));
        let s = parse_scenario("[IN:GET_WEATHER [SL:LOCATION x1 ] ]").unwrap();
        assert!(matches!(fill(&s, &[Span::new(3, 9)], &utt), Err(Error::Span(_))));
    }

    fn constant_logits(g: &mut Graph, rows: Vec<Vec<f64>>, t: usize) -> PointerLogits {
        let n = rows.len();
        let start = g.constant(Tensor::from_rows(&rows).unwrap());
        let end = g.constant(Tensor::from_rows(&rows).unwrap());
        PointerLogits {
            start,
            end,
            valid: vec![true; n * t],
            owners: (0..n).map(|v| (0, v)).collect(),
            utterance_segments: vec![0..t],
        }
    }

    #[test]
    fn uniform_pointer_loss_is_two_log_t() {
        let mut g = Graph::new();
        let logits = constant_logits(&mut g, vec![vec![0.0; 4]], 4);
        let loss = loss_filling(&mut g, Some(&logits), &[vec![Span::new(1, 3)]], 0.0).unwrap();
        assert!((g.value(loss).item() - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut g = Graph::new();
        // start at 1, end token at 2
        let logits = PointerLogits {
            start: g.constant(Tensor::from_rows(&[vec![0.0, 60.0, 0.0, 0.0]]).unwrap()),
            end: g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 60.0, 0.0]]).unwrap()),
            valid: vec![true; 4],
            owners: vec![(0, 0)],
            utterance_segments: vec![0..4],
        };
        let gold = [vec![Span::new(1, 3)]];
        let plain = loss_filling(&mut g, Some(&logits), &gold, 0.0).unwrap();
        assert!(g.value(plain).item() < 1e-20);
        let smoothed = loss_filling(&mut g, Some(&logits), &gold, 0.2).unwrap();
        assert!(g.value(smoothed).item() > g.value(plain).item());
        assert!(matches!(
            loss_filling(&mut g, Some(&logits), &[vec![Span::new(2, 5)]], 0.0),
            Err(Error::Span(_))
        ));
    }

    #[test]
    fn zero_variables_give_zero_loss_and_no_predictions() {
        let mut g = Graph::new();
        let loss = loss_filling(&mut g, None, &[vec![]], 0.2).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        assert_eq!(decode_spans(&g, None, 2), vec![Vec::new(), Vec::new()]);
    }

    #[test]
    fn decoding_keeps_end_after_start() {
        let mut g = Graph::new();
        let logits = PointerLogits {
            start: g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 5.0, 0.0]]).unwrap()),
            end: g.constant(Tensor::from_rows(&[vec![9.0, 0.0, 0.0, 1.0]]).unwrap()),
            valid: vec![true; 4],
            owners: vec![(0, 0)],
            utterance_segments: vec![0..4],
        };
        let p = decode_spans(&g, Some(&logits), 1);
        assert_eq!(p[0][0].span, Span::new(2, 4));
        let total: f64 = p[0][0].start_probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}
