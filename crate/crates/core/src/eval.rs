//! Inference over a cached index, evaluation modes and embedding export.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use scenparse_autodiff::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::bank::{partition_known_unknown, Domain, Knowledge, ScenarioBank, ScenarioId};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::filler::{decode_logits, decode_spans, fill, fuse_scenario_embeddings};
use crate::frame::{exact_match, exact_match_scenario, serialize_frame, Frame, Span, Utterance};
use crate::model::Model;
use crate::retrieval::{encode_utterance_vectors, top_n, ScenarioIndex};

/// Utterances decoded per graph during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: ScenarioId,
    pub score: f64,
    pub scenario: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseResult {
    pub utterance: String,
    pub candidates: Vec<Candidate>,
    pub scenario_id: ScenarioId,
    pub scenario: String,
    pub frame: String,
    pub spans: Vec<Span>,
    /// Frames for every candidate, filled independently and not rescored.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub filled_candidates: Vec<String>,
    #[serde(skip)]
    pub parsed: Option<Frame>,
}

/// Read-only view of everything inference needs.
#[derive(Clone, Copy)]
pub struct Parser<'a> {
    pub model: &'a Model,
    pub index: &'a ScenarioIndex,
    pub bank: &'a ScenarioBank,
}

impl<'a> Parser<'a> {
    /// Checks that the index belongs to this model and bank.
    pub fn new(
        model: &'a Model,
        index: &'a ScenarioIndex,
        bank: &'a ScenarioBank,
        allow_stale: bool,
    ) -> Result<Self> {
        index.check_fresh(&model.hash()?, allow_stale)?;
        index.check_bank(bank)?;
        Ok(Self { model, index, bank })
    }

    /// Spans for each utterance under the given scenario (one graph).
    fn fill_spans(&self, utts: &[&Utterance], chosen: &[ScenarioId]) -> Result<Vec<Vec<Span>>> {
        let model = self.model;
        let ids: Vec<Vec<usize>> = utts.iter().map(|u| model.utterance_ids(u)).collect();
        let mut g = Graph::new();
        let enc = model.encode_utterances(&mut g, &ids)?;
        let token_ids: Vec<Vec<usize>> = chosen.iter().map(|&c| self.index.token_ids[c].clone()).collect();
        let var_positions: Vec<Vec<usize>> =
            chosen.iter().map(|&c| self.index.var_positions[c].clone()).collect();
        let states = if model.config.scenario_fusion {
            let width = model.config.hidden;
            let mut data = Vec::new();
            let mut ranges = Vec::with_capacity(chosen.len());
            for &c in chosen {
                let t = &self.index.token_states[c];
                let start = data.len() / width;
                data.extend_from_slice(t.data());
                ranges.push(start..start + t.rows());
            }
            let rows = data.len() / width;
            let v = g.constant(Tensor::new(vec![rows, width], data)?);
            Some((v, ranges))
        } else {
            None
        };
        let dec_in = fuse_scenario_embeddings(
            &mut g,
            &model.store,
            &model.filler,
            model.config.scenario_fusion,
            &token_ids,
            states.as_ref().map(|(v, r)| (*v, r.as_slice())),
        )?;
        let logits = decode_logits(
            &mut g,
            &model.store,
            &model.filler,
            &dec_in,
            enc.states,
            &enc.segments,
            &var_positions,
        )?;
        Ok(decode_spans(&g, logits.as_ref(), utts.len())
            .into_iter()
            .map(|p| p.into_iter().map(|s| s.span).collect())
            .collect())
    }

    /// Retrieves top-`n` and fills the best scenario (or `forced[i]`).
    pub fn parse_batch(
        &self,
        utts: &[&Utterance],
        n: usize,
        forced: Option<&[ScenarioId]>,
    ) -> Result<Vec<ParseResult>> {
        let mut out = Vec::with_capacity(utts.len());
        for (c, part) in utts.chunks(EVAL_CHUNK).enumerate() {
            let vectors = encode_utterance_vectors(self.model, part, EVAL_CHUNK)?;
            let mut ranked = Vec::with_capacity(part.len());
            let mut chosen = Vec::with_capacity(part.len());
            for i in 0..part.len() {
                let r = top_n(&self.index.scores(vectors.row(i))?, n.max(1));
                let pick = match forced {
                    Some(f) => f[c * EVAL_CHUNK + i],
                    None => r[0].0,
                };
                if pick >= self.bank.len() {
                    return Err(Error::Config(format!("scenario id {pick} outside the bank")));
                }
                ranked.push(r);
                chosen.push(pick);
            }
            let spans = self.fill_spans(part, &chosen)?;
            for ((utt, r), (pick, sp)) in part.iter().zip(ranked).zip(chosen.into_iter().zip(spans)) {
                let scenario = self.bank.scenario(pick);
                let frame = fill(scenario, &sp, utt)?;
                out.push(ParseResult {
                    utterance: utt.text(),
                    candidates: r
                        .into_iter()
                        .take(n)
                        .map(|(id, score)| Candidate {
                            id,
                            score,
                            scenario: self.bank.scenario(id).canonical().to_string(),
                        })
                        .collect(),
                    scenario_id: pick,
                    scenario: scenario.canonical().to_string(),
                    frame: serialize_frame(&frame, utt),
                    spans: sp,
                    filled_candidates: Vec::new(),
                    parsed: Some(frame),
                });
            }
        }
        Ok(out)
    }

    pub fn parse_one(&self, raw: &str, n: usize) -> Result<ParseResult> {
        let utt = Utterance::new(raw)?;
        let mut r = self.parse_batch(&[&utt], n, None)?;
        Ok(r.remove(0))
    }

    /// Like `parse_one`, additionally filling every top-`n` candidate.
    pub fn parse_one_fill_all(&self, raw: &str, n: usize) -> Result<ParseResult> {
        let utt = Utterance::new(raw)?;
        let mut best = self.parse_batch(&[&utt], n, None)?.remove(0);
        let ids: Vec<ScenarioId> = best.candidates.iter().map(|c| c.id).collect();
        let copies: Vec<&Utterance> = ids.iter().map(|_| &utt).collect();
        best.filled_candidates = self
            .parse_batch(&copies, 1, Some(&ids))?
            .into_iter()
            .map(|r| r.frame)
            .collect();
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Standard,
    OracleRetrieval,
    OracleFilling,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Standard => "standard",
            EvalMode::OracleRetrieval => "oracle_retrieval",
            EvalMode::OracleFilling => "oracle_filling",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "standard" => Ok(EvalMode::Standard),
            "oracle_retrieval" => Ok(EvalMode::OracleRetrieval),
            "oracle_filling" => Ok(EvalMode::OracleFilling),
            _ => Err(Error::Config(format!("unknown evaluation mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub count: usize,
    pub em_count: usize,
    /// Percentage, two decimals.
    pub em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub samples: usize,
    pub top_n: usize,
    /// Percentages with two decimals.
    pub em: f64,
    /// Scenario of the emitted frame matches the gold scenario.
    pub em_s: f64,
    /// Rank-1 retrieved scenario is the gold one.
    pub retrieval_top1: f64,
    pub retrieval_top_n: f64,
    pub em_count: usize,
    pub em_s_count: usize,
    pub retrieval_top1_count: usize,
    pub retrieval_top_n_count: usize,
    /// `known`, `unknown`, `in_domain`, `out_of_domain`.
    pub breakdown: BTreeMap<String, Breakdown>,
    pub config_hash: String,
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (10_000.0 * count as f64 / total as f64).round() / 100.0
}

/// Scores `samples` under `mode`. The bank must contain every gold scenario.
pub fn evaluate(
    parser: &Parser<'_>,
    samples: &[Sample],
    mode: EvalMode,
    n: usize,
    unsupported_prefix: &str,
) -> Result<EvalReport> {
    let n = n.max(1);
    let golds: Vec<ScenarioId> = samples
        .iter()
        .map(|s| parser.bank.id_of_frame(&s.frame))
        .collect::<Result<_>>()?;
    let utts: Vec<&Utterance> = samples.iter().map(|s| &s.utterance).collect();
    let forced = (mode == EvalMode::OracleRetrieval).then_some(golds.as_slice());
    let results = parser.parse_batch(&utts, n, forced)?;

    let mut em_count = 0;
    let mut em_s_count = 0;
    let mut top1 = 0;
    let mut topn = 0;
    let mut parts: BTreeMap<String, Breakdown> = ["known", "unknown", "in_domain", "out_of_domain"]
        .into_iter()
        .map(|k| (k.to_string(), Breakdown::default()))
        .collect();
    for ((s, r), &gold) in samples.iter().zip(&results).zip(&golds) {
        let mut pred = r.parsed.clone().expect("parse result carries its frame");
        if mode == EvalMode::OracleFilling && r.scenario_id == gold {
            pred = s.frame.clone();
        }
        let em = exact_match(&pred, &s.frame, &s.utterance);
        let em_s = exact_match_scenario(&pred, &s.frame);
        assert!(!em || em_s, "exact match without scenario match");
        em_count += usize::from(em);
        em_s_count += usize::from(em_s);
        top1 += usize::from(r.candidates.first().is_some_and(|c| c.id == gold));
        topn += usize::from(r.candidates.iter().any(|c| c.id == gold));
        let (knowledge, domain) = partition_known_unknown(parser.bank, &s.frame, unsupported_prefix)?;
        let k = match knowledge {
            Knowledge::Known => "known",
            Knowledge::Unknown => "unknown",
        };
        let d = match domain {
            Domain::InDomain => "in_domain",
            Domain::OutOfDomain => "out_of_domain",
        };
        for key in [k, d] {
            let b = parts.get_mut(key).expect("breakdown key");
            b.count += 1;
            b.em_count += usize::from(em);
        }
    }
    for b in parts.values_mut() {
        b.em = percent(b.em_count, b.count);
    }
    let total = samples.len();
    let report = EvalReport {
        mode,
        samples: total,
        top_n: n,
        em: percent(em_count, total),
        em_s: percent(em_s_count, total),
        retrieval_top1: percent(top1, total),
        retrieval_top_n: percent(topn, total),
        em_count,
        em_s_count,
        retrieval_top1_count: top1,
        retrieval_top_n_count: topn,
        breakdown: parts,
        config_hash: parser.model.hash()?,
    };
    assert!(report.em_count <= report.em_s_count, "EM exceeds EM-S");
    Ok(report)
}

/// Projection of the rows onto their top two principal components.
/// A single row (or constant data) projects to zeros.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centered = nalgebra::DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = vec![[0.0; 2]; n];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        // fix the sign: largest-magnitude component positive
        let lead = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        if d > 0 && v[lead] < 0.0 {
            v = -v;
        }
        if eig.eigenvalues[k] <= 1e-12 * (1.0 + eig.eigenvalues[order[0]].abs()) {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            o[slot] = centered.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// CSV: raw utterance vector, two PCA coordinates, gold and predicted ids.
pub fn export_embeddings(parser: &Parser<'_>, samples: &[Sample], out: &Path) -> Result<()> {
    let utts: Vec<&Utterance> = samples.iter().map(|s| &s.utterance).collect();
    let vectors = encode_utterance_vectors(parser.model, &utts, EVAL_CHUNK)?;
    let rows: Vec<Vec<f64>> = (0..samples.len()).map(|i| vectors.row(i).to_vec()).collect();
    let pcs = pca_2d(&rows);
    let d = parser.model.config.out_dim;
    let mut text = String::new();
    let header: Vec<String> = (0..d)
        .map(|i| format!("d{i}"))
        .chain(["pc1", "pc2", "gold_id", "predicted_id"].map(String::from))
        .collect();
    text.push_str(&header.join(","));
    text.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let gold = parser.bank.id_of_frame(&s.frame)?;
        let predicted = top_n(&parser.index.scores(&rows[i])?, 1)[0].0;
        let mut fields: Vec<String> = rows[i].iter().map(|x| x.to_string()).collect();
        fields.push(pcs[i][0].to_string());
        fields.push(pcs[i][1].to_string());
        fields.push(gold.to_string());
        fields.push(predicted.to_string());
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    let mut f = fs::File::create(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(out.display().to_string(), e))
}
