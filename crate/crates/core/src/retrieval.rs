//! Dot-product retrieval: contrastive loss with identity masking and the
//! cached scenario index used at inference.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use scenparse_autodiff::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::bank::{ScenarioBank, ScenarioId};
use crate::error::{Error, Result};
use crate::frame::Utterance;
use crate::model::Model;
use crate::repr::ReprKind;

/// Plain dot product.
pub fn similarity(u: &[f64], s: &[f64]) -> Result<f64> {
    if u.len() != s.len() {
        return Err(Error::Config(format!(
            "similarity of vectors with {} and {} dimensions",
            u.len(),
            s.len()
        )));
    }
    Ok(u.iter().zip(s).map(|(a, b)| a * b).sum())
}

/// `M[i][j] = u_i . s_j`.
pub fn similarity_matrix(u: &Tensor, s: &Tensor) -> Result<Tensor> {
    if u.rows() == 0 || s.rows() == 0 {
        return Err(Error::Config("similarity matrix of an empty batch".into()));
    }
    if u.cols() != s.cols() {
        return Err(Error::Config(format!(
            "similarity matrix of {:?} and {:?}",
            u.shape(),
            s.shape()
        )));
    }
    let mut m = Tensor::zeros(u.rows(), s.rows());
    for i in 0..u.rows() {
        for j in 0..s.rows() {
            m.set(i, j, similarity(u.row(i), s.row(j))?);
        }
    }
    Ok(m)
}

/// Which scored scenarios enter each row's softmax denominator.
///
/// Scores are laid out as `[batch, pool.len()]`. Every pooled scenario other
/// than the row's gold is a negative for that row (in-batch golds of other
/// rows and every row's hard negatives), each id counted once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveLayout {
    pub pool: Vec<ScenarioId>,
    /// Column of each row's gold scenario.
    pub positive: Vec<usize>,
    /// Row-major `[batch, pool]`; true where a column is not a negative.
    pub excluded: Vec<bool>,
    /// Without identity masking, rows whose gold id also appears among the
    /// negatives (a duplicate gold elsewhere in the batch) count it twice.
    pub gold_as_negative: Vec<bool>,
}

impl ContrastiveLayout {
    pub fn batch(&self) -> usize {
        self.positive.len()
    }

    /// Scenario ids in row `i`'s denominator besides the positive, with
    /// multiplicity.
    pub fn denominator_negatives(&self, i: usize) -> Vec<ScenarioId> {
        let n = self.pool.len();
        let mut out: Vec<ScenarioId> = (0..n)
            .filter(|&c| !self.excluded[i * n + c])
            .map(|c| self.pool[c])
            .collect();
        if self.gold_as_negative[i] {
            out.push(self.pool[self.positive[i]]);
        }
        out
    }
}

/// Pools the batch golds and hard negatives (first-seen order) and masks
/// each row's own gold out of its negatives when `identity_masking` is on.
pub fn build_identity_mask(
    golds: &[ScenarioId],
    hard: &[Vec<ScenarioId>],
    identity_masking: bool,
) -> ContrastiveLayout {
    let mut pool = Vec::new();
    let mut column: HashMap<ScenarioId, usize> = HashMap::new();
    let mut occurrences: HashMap<ScenarioId, usize> = HashMap::new();
    for &id in golds.iter().chain(hard.iter().flatten()) {
        column.entry(id).or_insert_with(|| {
            pool.push(id);
            pool.len() - 1
        });
        *occurrences.entry(id).or_default() += 1;
    }
    let n = pool.len();
    let positive: Vec<usize> = golds.iter().map(|g| column[g]).collect();
    let mut excluded = vec![false; golds.len() * n];
    let mut gold_as_negative = vec![false; golds.len()];
    for (i, &c) in positive.iter().enumerate() {
        excluded[i * n + c] = true;
        gold_as_negative[i] = !identity_masking && occurrences[&golds[i]] > 1;
    }
    ContrastiveLayout {
        pool,
        positive,
        excluded,
        gold_as_negative,
    }
}

const MASKED_SCORE: f64 = -1e30;

/// Mean over rows of `-log softmax(positive | positive + negatives)`.
///
/// `scores` is `[batch, pool]` as described by `layout`. A row without any
/// negative contributes exactly 0.
pub fn loss_retrieval(g: &mut Graph, scores: Var, layout: &ContrastiveLayout) -> Result<Var> {
    let shape = g.value(scores).shape().to_vec();
    if shape != [layout.batch(), layout.pool.len()] {
        return Err(Error::Config(format!(
            "scores {shape:?} do not match a batch of {} over {} scenarios",
            layout.batch(),
            layout.pool.len()
        )));
    }
    let at: Vec<(usize, usize)> = layout.positive.iter().copied().enumerate().collect();
    let positive = g.pick(scores, &at)?;
    let negatives = g.masked_fill(scores, &layout.excluded, MASKED_SCORE)?;
    let mut columns = vec![positive, negatives];
    if layout.gold_as_negative.iter().any(|&d| d) {
        columns.push(g.masked_fill(positive, &invert(&layout.gold_as_negative), MASKED_SCORE)?);
    }
    let logits = g.concat_cols(&columns)?;
    let lse = g.logsumexp(logits);
    let per_row = g.sub(lse, positive)?;
    Ok(g.mean_all(per_row)?)
}

fn invert(mask: &[bool]) -> Vec<bool> {
    mask.iter().map(|m| !m).collect()
}

/// Pooled utterance vectors, encoded `chunk` at a time. Row i is utterance i.
pub fn encode_utterance_vectors(model: &Model, utts: &[&Utterance], chunk: usize) -> Result<Tensor> {
    let d = model.config.out_dim;
    let mut data = Vec::with_capacity(utts.len() * d);
    for part in utts.chunks(chunk.max(1)) {
        let ids: Vec<Vec<usize>> = part.iter().map(|u| model.utterance_ids(u)).collect();
        let mut g = Graph::new();
        let enc = model.encode_utterances(&mut g, &ids)?;
        data.extend_from_slice(g.value(enc.pooled).data());
    }
    Ok(Tensor::new(vec![utts.len(), d], data)?)
}

/// Cached encodings of every bank scenario under one representation kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioIndex {
    pub checkpoint_hash: String,
    pub repr_kind: ReprKind,
    /// Canonical strings, row i = bank id i.
    pub scenarios: Vec<String>,
    /// `[bank, d]`
    pub vectors: Tensor,
    /// Final encoder states per scenario, kept for fusion.
    pub token_states: Vec<Tensor>,
    pub token_ids: Vec<Vec<usize>>,
    pub var_positions: Vec<Vec<usize>>,
}

/// Encodes each bank scenario on its own.
pub fn build_index(model: &Model, bank: &ScenarioBank, kind: ReprKind) -> Result<ScenarioIndex> {
    if bank.is_empty() {
        return Err(Error::Config("cannot index an empty bank".into()));
    }
    let d = model.config.out_dim;
    let mut vectors = Vec::with_capacity(bank.len() * d);
    let mut token_states = Vec::with_capacity(bank.len());
    let mut token_ids = Vec::with_capacity(bank.len());
    let mut var_positions = Vec::with_capacity(bank.len());
    for entry in bank.entries() {
        let toks = model.scenario_tokens(&entry.scenario, kind);
        let mut g = Graph::new();
        let enc = model.encode_scenarios(&mut g, std::slice::from_ref(&toks.ids))?;
        vectors.extend_from_slice(g.value(enc.pooled).data());
        token_states.push(g.value(enc.states).clone());
        token_ids.push(toks.ids);
        var_positions.push(toks.var_positions);
    }
    Ok(ScenarioIndex {
        checkpoint_hash: model.hash()?,
        repr_kind: kind,
        scenarios: bank
            .entries()
            .iter()
            .map(|e| e.scenario.canonical().to_string())
            .collect(),
        vectors: Tensor::new(vec![bank.len(), d], vectors)?,
        token_states,
        token_ids,
        var_positions,
    })
}

impl ScenarioIndex {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    /// Refuses an index built for a different checkpoint unless `allow_stale`.
    pub fn check_fresh(&self, model_hash: &str, allow_stale: bool) -> Result<()> {
        if self.checkpoint_hash == model_hash {
            return Ok(());
        }
        if allow_stale {
            log::warn!(
                "serving stale index built for {} with model {}",
                self.checkpoint_hash,
                model_hash
            );
            return Ok(());
        }
        Err(Error::StaleIndex {
            index: self.checkpoint_hash.clone(),
            model: model_hash.to_string(),
        })
    }

    /// The index must list exactly the bank's scenarios in id order.
    pub fn check_bank(&self, bank: &ScenarioBank) -> Result<()> {
        let same = self.scenarios.len() == bank.len()
            && bank
                .entries()
                .iter()
                .zip(&self.scenarios)
                .all(|(e, c)| e.scenario.canonical() == c);
        if same {
            Ok(())
        } else {
            Err(Error::Config("index does not match the scenario bank".into()))
        }
    }

    pub fn scores(&self, u: &[f64]) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|i| similarity(u, self.vectors.row(i)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Exact top-n by score, descending; ties go to the smaller id.
pub fn top_n(scores: &[f64], n: usize) -> Vec<(ScenarioId, f64)> {
    let mut ranked: Vec<(ScenarioId, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(n);
    ranked
}

pub fn retrieve_top_n(index: &ScenarioIndex, u: &[f64], n: usize) -> Result<Vec<(ScenarioId, f64)>> {
    Ok(top_n(&index.scores(u)?, n))
}
