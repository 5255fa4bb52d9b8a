//! Joint objective and the three-round training schedule.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenparse_autodiff::{Adam, AdamConfig, Graph, LrSchedule, Var};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bank::{ScenarioBank, ScenarioId};
use crate::dataset::Sample;
use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::filler::{decode_logits, fuse_scenario_embeddings, loss_filling};
use crate::frame::Span;
use crate::model::{Model, ModelConfig, ScenarioTokens};
use crate::negatives::{heuristic_negatives, mine_model_negatives, NegativeSet};
use crate::repr::{render_tokens, sample_repr_kind, OntologyRegistry, ReprKind};
use crate::retrieval::{build_identity_mask, build_index, loss_retrieval};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the retrieval loss in the joint objective.
    pub beta: f64,
    /// Label-smoothing weight of the filling loss.
    pub alpha: f64,
    pub batch_size: usize,
    /// Model-mined negatives per example.
    pub k: usize,
    /// Edit-distance negatives per example (when enabled).
    pub heuristic_n: usize,
    /// Epochs per training round.
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub repr_kinds: Vec<ReprKind>,
    pub inference_repr: ReprKind,
    pub max_examples: usize,

    pub hard_negatives: bool,
    pub identity_masking: bool,
    pub scenario_fusion: bool,
    pub parameter_sharing: bool,
    pub repr_sampling: bool,
    pub heuristic_negatives: bool,
    /// Reserved; the perturbation regularizer is not implemented.
    pub r3f: bool,
    pub reinit_round3: bool,

    pub hidden: usize,
    pub out_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub decoder_layers: usize,
    pub pooling: Pooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            beta: 2.69,
            alpha: 0.2,
            batch_size: 32,
            k: 3,
            heuristic_n: 3,
            epochs: 15,
            seed: 0,
            learning_rate: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            repr_kinds: ReprKind::INTRINSIC.to_vec(),
            inference_repr: ReprKind::INFERENCE_DEFAULT,
            max_examples: crate::repr::DEFAULT_MAX_EXAMPLES,
            hard_negatives: true,
            identity_masking: true,
            scenario_fusion: true,
            parameter_sharing: true,
            repr_sampling: true,
            heuristic_negatives: false,
            r3f: false,
            reinit_round3: false,
            hidden: m.hidden,
            out_dim: m.out_dim,
            layers: m.layers,
            heads: m.heads,
            ffn: m.ffn,
            max_positions: m.max_positions,
            decoder_layers: m.decoder_layers,
            pooling: m.pooling,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.r3f {
            return Err(Error::Config("r3f regularization is not implemented".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be a finite value >= 0".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be a finite value >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.repr_sampling && self.repr_kinds.is_empty() {
            return Err(Error::Config("no representation kinds enabled".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            out_dim: self.out_dim,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            max_positions: self.max_positions,
            decoder_layers: self.decoder_layers,
            pooling: self.pooling,
            shared_encoders: self.parameter_sharing,
            scenario_fusion: self.scenario_fusion,
            inference_repr: self.inference_repr,
        }
    }

    fn enabled_kinds(&self) -> Vec<ReprKind> {
        if self.repr_sampling {
            self.repr_kinds.clone()
        } else {
            vec![self.inference_repr]
        }
    }
}

/// `beta * retrieval + filling`.
pub fn joint_loss_value(retrieval: f64, filling: f64, beta: f64) -> f64 {
    beta * retrieval + filling
}

pub fn joint_loss(g: &mut Graph, retrieval: Var, filling: Var, beta: f64) -> Result<Var> {
    let weighted = g.scale(retrieval, beta);
    Ok(g.add(weighted, filling)?)
}

/// Shared vocabulary: training utterances, every bank scenario under every
/// representation kind, and the registry's descriptions and examples.
pub fn build_vocab(train: &[Sample], bank: &ScenarioBank, registry: &OntologyRegistry) -> Vocab {
    let mut tokens: BTreeSet<String> = BTreeSet::new();
    for s in train {
        tokens.extend(s.utterance.tokens().iter().cloned());
    }
    for e in bank.entries() {
        for kind in ReprKind::ALL {
            tokens.extend(render_tokens(&e.scenario, kind, registry).tokens);
        }
    }
    for d in registry.handmade.values() {
        tokens.extend(d.split_whitespace().map(str::to_lowercase));
    }
    for ex in registry.examples.values().flatten() {
        tokens.extend(ex.split_whitespace().map(str::to_lowercase));
    }
    Vocab::build(tokens)
}

/// Greedy samples-per-intent-and-slot subset: in seeded-shuffled order, keep
/// a sample iff one of its labels has been kept fewer than `spis_k` times.
/// The subset is returned in original order.
pub fn spis_sample(samples: &[Sample], spis_k: usize, seed: u64) -> Result<Vec<Sample>> {
    if spis_k == 0 {
        return Err(Error::Config("spis_k must be positive".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut keep = vec![false; samples.len()];
    for i in order {
        let labels = frame_labels(&samples[i]);
        if labels.iter().any(|l| counts.get(l).copied().unwrap_or(0) < spis_k) {
            keep[i] = true;
            for l in labels {
                *counts.entry(l).or_default() += 1;
            }
        }
    }
    Ok(samples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(s, _)| s.clone())
        .collect())
}

fn frame_labels(s: &Sample) -> Vec<String> {
    s.scenario().labels().into_iter().map(String::from).collect()
}

/// Everything a training round needs per example, resolved once.
struct TrainingSet {
    utterance_ids: Vec<Vec<usize>>,
    golds: Vec<ScenarioId>,
    spans: Vec<Vec<Span>>,
    hard: Vec<Vec<ScenarioId>>,
}

/// Rendered scenario tokens for every (bank id, kind) used in training.
struct RenderCache {
    tokens: HashMap<(ScenarioId, ReprKind), ScenarioTokens>,
}

impl RenderCache {
    fn new(model: &Model, bank: &ScenarioBank, kinds: &[ReprKind]) -> Self {
        let mut tokens = HashMap::new();
        for e in bank.entries() {
            for &k in kinds {
                tokens.insert((e.id, k), model.scenario_tokens(&e.scenario, k));
            }
        }
        Self { tokens }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub joint: f64,
    pub retrieval: f64,
    pub filling: f64,
}

/// One optimization step on a batch of example indices.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    config: &TrainConfig,
    data: &TrainingSet,
    cache: &RenderCache,
    kinds: &[ReprKind],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let golds: Vec<ScenarioId> = batch.iter().map(|&i| data.golds[i]).collect();
    let hard: Vec<Vec<ScenarioId>> = batch.iter().map(|&i| data.hard[i].clone()).collect();
    let layout = build_identity_mask(&golds, &hard, config.identity_masking);
    let mut pool_tokens = Vec::with_capacity(layout.pool.len());
    for &id in &layout.pool {
        let kind = sample_repr_kind(rng, kinds)?;
        pool_tokens.push(&cache.tokens[&(id, kind)]);
    }
    let pool_ids: Vec<Vec<usize>> = pool_tokens.iter().map(|t| t.ids.clone()).collect();
    let utt_ids: Vec<Vec<usize>> = batch.iter().map(|&i| data.utterance_ids[i].clone()).collect();

    let mut g = Graph::new();
    let u = model.encode_utterances(&mut g, &utt_ids)?;
    let s = model.encode_scenarios(&mut g, &pool_ids)?;
    let scores = g.matmul_nt(u.pooled, s.pooled)?;
    let retrieval = loss_retrieval(&mut g, scores, &layout)?;

    let row_ids: Vec<Vec<usize>> = layout.positive.iter().map(|&c| pool_ids[c].clone()).collect();
    let row_states: Vec<_> = layout.positive.iter().map(|&c| s.segments[c].clone()).collect();
    let row_vars: Vec<Vec<usize>> = layout
        .positive
        .iter()
        .map(|&c| pool_tokens[c].var_positions.clone())
        .collect();
    let dec_in = fuse_scenario_embeddings(
        &mut g,
        &model.store,
        &model.filler,
        model.config.scenario_fusion,
        &row_ids,
        Some((s.states, &row_states)),
    )?;
    let logits = decode_logits(
        &mut g,
        &model.store,
        &model.filler,
        &dec_in,
        u.states,
        &u.segments,
        &row_vars,
    )?;
    let gold_spans: Vec<Vec<Span>> = batch.iter().map(|&i| data.spans[i].clone()).collect();
    let filling = loss_filling(&mut g, logits.as_ref(), &gold_spans, config.alpha)?;
    let joint = joint_loss(&mut g, retrieval, filling, config.beta)?;

    let losses = StepLosses {
        joint: g.value(joint).item(),
        retrieval: g.value(retrieval).item(),
        filling: g.value(filling).item(),
    };
    if !losses.joint.is_finite() {
        return Err(Error::Config(format!("non-finite training loss {}", losses.joint)));
    }
    let grads = g.backward(joint)?;
    let param_grads = grads.param_grads(model.store.len());
    adam.step(&mut model.store, &param_grads)?;
    Ok(losses)
}

/// Trains `model` for `config.epochs` epochs; returns the mean joint loss per epoch.
fn train_round(
    model: &mut Model,
    config: &TrainConfig,
    data: &TrainingSet,
    bank: &ScenarioBank,
    rng: &mut ChaCha8Rng,
    round: usize,
) -> Result<Vec<f64>> {
    let n = data.golds.len();
    if n == 0 {
        return Err(Error::Config("no training samples".into()));
    }
    let kinds = config.enabled_kinds();
    let cache = RenderCache::new(model, bank, &kinds);
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let schedule = LrSchedule {
        base_lr: config.learning_rate,
        warmup_steps: config.warmup_steps,
        total_steps: steps_per_epoch * config.epochs,
    };
    let adam_config = AdamConfig {
        beta1: config.adam_beta1,
        beta2: config.adam_beta2,
        eps: config.adam_eps,
        weight_decay: config.weight_decay,
    };
    let mut adam = Adam::new(&model.store, adam_config, schedule);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            total += train_step(model, &mut adam, config, data, &cache, &kinds, batch, rng)?.joint;
        }
        let mean = total / steps_per_epoch as f64;
        log::info!("round {round} epoch {} loss {mean:.5}", epoch + 1);
        curve.push(mean);
    }
    Ok(curve)
}

fn training_set(model: &Model, train: &[Sample], bank: &ScenarioBank) -> Result<TrainingSet> {
    let mut golds = Vec::with_capacity(train.len());
    for s in train {
        golds.push(bank.id_of_frame(&s.frame)?);
    }
    Ok(TrainingSet {
        utterance_ids: train.iter().map(|s| model.utterance_ids(&s.utterance)).collect(),
        spans: train.iter().map(|s| s.frame.spans()).collect(),
        hard: vec![Vec::new(); train.len()],
        golds,
    })
}

fn merge_negatives(a: &[ScenarioId], b: &[ScenarioId]) -> Vec<ScenarioId> {
    let mut out = a.to_vec();
    for id in b {
        if !out.contains(id) {
            out.push(*id);
        }
    }
    out
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub round1: Model,
    pub negatives: Option<NegativeSet>,
    pub round3: Option<Model>,
}

impl TrainOutcome {
    /// The model to evaluate: round 3 when it ran, otherwise round 1.
    pub fn final_model(&self) -> &Model {
        self.round3.as_ref().unwrap_or(&self.round1)
    }

    /// Writes `round1.json`, `negatives.jsonl`, `round3.json` and `model.json`
    /// (a copy of the final model) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        self.round1.save(&dir.join("round1.json"))?;
        if let Some(n) = &self.negatives {
            n.save(&dir.join("negatives.jsonl"))?;
        }
        if let Some(m) = &self.round3 {
            m.save(&dir.join("round3.json"))?;
        }
        self.final_model().save(&dir.join("model.json"))
    }
}

/// Builds a fresh model: example values sampled from `train`, vocabulary over
/// the data and bank.
pub fn initial_model(
    config: &TrainConfig,
    train: &[Sample],
    bank: &ScenarioBank,
    mut registry: OntologyRegistry,
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    registry.collect_all_examples(train, rng, config.max_examples);
    let vocab = build_vocab(train, bank, &registry);
    Model::new(config.model_config(), vocab, registry, config.seed)
}

/// Round 1 with in-batch negatives (plus heuristic ones if enabled), mining
/// with the round-1 model, then round 3 with the mined negatives added.
/// With `hard_negatives` off only round 1 runs.
pub fn three_round_train(
    config: &TrainConfig,
    train: &[Sample],
    bank: &ScenarioBank,
    registry: OntologyRegistry,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = initial_model(config, train, bank, registry, &mut rng)?;
    let mut data = training_set(&model, train, bank)?;
    if config.heuristic_negatives {
        for (i, s) in train.iter().enumerate() {
            data.hard[i] = heuristic_negatives(&s.scenario(), bank, config.heuristic_n);
        }
    }
    let heuristic = data.hard.clone();
    let initial = model.clone();

    let curve1 = train_round(&mut model, config, &data, bank, &mut rng, 1)?;
    model.metadata = metadata(config, 1, &curve1, None);
    let round1 = model;
    if !config.hard_negatives {
        return Ok(TrainOutcome {
            round1,
            negatives: None,
            round3: None,
        });
    }

    let index = build_index(&round1, bank, config.inference_repr)?;
    let mined = mine_model_negatives(&round1, &index, train, bank, config.k)?;
    for (i, h) in heuristic.iter().enumerate() {
        data.hard[i] = merge_negatives(mined.get(i), h);
    }

    let mut model = if config.reinit_round3 {
        initial
    } else {
        round1.clone()
    };
    model.metadata.clear();
    let curve3 = train_round(&mut model, config, &data, bank, &mut rng, 3)?;
    model.metadata = metadata(config, 3, &curve3, Some(round1.hash()?));
    Ok(TrainOutcome {
        round1,
        negatives: Some(mined),
        round3: Some(model),
    })
}

fn metadata(
    config: &TrainConfig,
    round: usize,
    curve: &[f64],
    round1_hash: Option<String>,
) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("round".into(), json!(round));
    m.insert("train_config".into(), json!(config));
    m.insert("epoch_losses".into(), json!(curve));
    // with k = 0 mining yields nothing and round 3 repeats the round-1 objective
    m.insert("rounds_equivalent".into(), json!(config.k == 0));
    if let Some(h) = round1_hash {
        m.insert("round1_sha256".into(), json!(h));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_dataset;

    #[test]
    fn joint_loss_arithmetic() {
        assert!((joint_loss_value(0.5, 1.0, 2.69) - 2.345).abs() < 1e-12);
        assert_eq!(joint_loss_value(7.0, 1.5, 0.0), 1.5);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = TrainConfig::default();
        assert_eq!(c.beta, 2.69);
        assert_eq!(c.alpha, 0.2);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("epochs = 2\nhard_negatives = false\n").unwrap();
        assert_eq!(partial.epochs, 2);
        assert!(!partial.hard_negatives);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig::from_toml("r3f = true").is_err());
        assert!(TrainConfig::from_toml("beta = -1.0").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml("no_such_key = 1").is_err());
    }

    fn one_label_dataset(n: usize) -> Vec<Sample> {
        let text: String = (0..n)
            .map(|i| format!("stop number {i}\t[IN:STOP ]\n"))
            .collect();
        parse_dataset(&text).unwrap()
    }

    #[test]
    fn spis_single_label() {
        let d = one_label_dataset(100);
        assert_eq!(spis_sample(&d, 10, 4).unwrap().len(), 10);
        assert_eq!(spis_sample(&d, 1000, 4).unwrap().len(), 100);
        assert!(spis_sample(&d, 0, 4).is_err());
    }
}
