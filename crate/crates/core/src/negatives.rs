//! Hard negatives: mined from a trained model or picked by edit distance.

use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::{ScenarioBank, ScenarioId};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::frame::Scenario;
use crate::model::Model;
use crate::retrieval::{encode_utterance_vectors, ScenarioIndex};

/// Unit-cost edit distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// The `n` same-intent scenarios closest to `gold` by edit distance on
/// canonical strings, nearest first, ties by id.
pub fn heuristic_negatives(gold: &Scenario, bank: &ScenarioBank, n: usize) -> Vec<ScenarioId> {
    if n == 0 {
        return Vec::new();
    }
    // max-heap on (distance, id) holding the n best seen so far
    let mut heap: BinaryHeap<(usize, ScenarioId)> = BinaryHeap::with_capacity(n + 1);
    for &id in bank.same_intent(gold.top_intent()) {
        let candidate = bank.scenario(id);
        if candidate.canonical() == gold.canonical() {
            continue;
        }
        let key = (levenshtein(gold.canonical(), candidate.canonical()), id);
        if heap.len() < n {
            heap.push(key);
        } else if heap.peek().is_some_and(|top| key < *top) {
            heap.pop();
            heap.push(key);
        }
    }
    heap.into_sorted_vec().into_iter().map(|(_, id)| id).collect()
}

/// Negative scenario ids per training example.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NegativeSet {
    pub negatives: Vec<Vec<ScenarioId>>,
}

#[derive(Serialize, Deserialize)]
struct NegativeLine {
    example_id: usize,
    negative_ids: Vec<ScenarioId>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.negatives.is_empty()
    }

    pub fn get(&self, example: usize) -> &[ScenarioId] {
        self.negatives.get(example).map_or(&[], Vec::as_slice)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (i, ids) in self.negatives.iter().enumerate() {
            out.push_str(&serde_json::to_string(&NegativeLine {
                example_id: i,
                negative_ids: ids.clone(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut negatives = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let l: NegativeLine = serde_json::from_str(line)?;
            if l.example_id != i {
                return Err(Error::Config(format!(
                    "negatives line {} has example_id {}",
                    i + 1,
                    l.example_id
                )));
            }
            negatives.push(l.negative_ids);
        }
        Ok(Self { negatives })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_jsonl(&text)
    }
}

/// Top-k non-gold scenarios for each sample under the model's similarity.
pub fn mine_model_negatives(
    model: &Model,
    index: &ScenarioIndex,
    samples: &[Sample],
    bank: &ScenarioBank,
    k: usize,
) -> Result<NegativeSet> {
    index.check_bank(bank)?;
    let max_k = bank.len().saturating_sub(1);
    let k = if k > max_k {
        log::warn!("k={k} exceeds bank size - 1; clamped to {max_k}");
        max_k
    } else {
        k
    };
    if k == 0 {
        return Ok(NegativeSet {
            negatives: vec![Vec::new(); samples.len()],
        });
    }
    let utts: Vec<_> = samples.iter().map(|s| &s.utterance).collect();
    let vectors = encode_utterance_vectors(model, &utts, 64)?;
    let mut negatives = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let gold = bank.id_of_frame(&s.frame)?;
        let scores = index.scores(vectors.row(i))?;
        let mut ranked: Vec<(ScenarioId, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(id, _)| id != gold)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        negatives.push(ranked.into_iter().take(k).map(|(id, _)| id).collect());
    }
    Ok(NegativeSet { negatives })
}
