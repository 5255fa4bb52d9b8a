//! The bi-encoder plus filler, its configuration and checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenparse_autodiff::{Graph, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{encode, Encoded, EncoderDims, EncoderParams, Pooling};
use crate::error::{Error, Result};
use crate::filler::FillerParams;
use crate::frame::{Scenario, Utterance};
use crate::repr::{render_tokens, OntologyRegistry, ReprKind};
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub out_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub decoder_layers: usize,
    pub pooling: Pooling,
    /// One encoder for both utterances and scenarios.
    pub shared_encoders: bool,
    /// Decoder inputs come from the scenario encoder's token states.
    pub scenario_fusion: bool,
    pub inference_repr: ReprKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            out_dim: 64,
            layers: 1,
            heads: 4,
            ffn: 128,
            max_positions: 128,
            decoder_layers: 1,
            pooling: Pooling::Mean,
            shared_encoders: true,
            scenario_fusion: true,
            inference_repr: ReprKind::INFERENCE_DEFAULT,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers > 2 {
            return Err(Error::Config("encoder layers must be 0, 1 or 2".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.hidden == 0 || self.out_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Tokens of a rendered scenario mapped to ids, with variable offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioTokens {
    pub ids: Vec<usize>,
    pub var_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub registry: OntologyRegistry,
    pub store: ParamStore,
    pub utterance_encoder: EncoderParams,
    pub scenario_encoder: EncoderParams,
    pub filler: FillerParams,
    /// Free-form training record (round, flags, seed, loss curve, ...).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    sha256: String,
    model: Model,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, registry: OntologyRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            vocab: vocab.len(),
            hidden: config.hidden,
            out_dim: config.out_dim,
            layers: config.layers,
            heads: config.heads,
            ffn: config.ffn,
            max_positions: config.max_positions,
        };
        let utterance_encoder =
            EncoderParams::init(&mut store, &mut rng, "utterance", dims, config.pooling);
        let scenario_encoder = if config.shared_encoders {
            utterance_encoder.clone()
        } else {
            EncoderParams::init(&mut store, &mut rng, "scenario", dims, config.pooling)
        };
        let filler = FillerParams::init(
            &mut store,
            &mut rng,
            vocab.len(),
            config.hidden,
            config.heads,
            config.ffn,
            config.decoder_layers,
            config.max_positions,
        );
        Ok(Self {
            config,
            vocab,
            registry,
            store,
            utterance_encoder,
            scenario_encoder,
            filler,
            metadata: BTreeMap::new(),
        })
    }

    pub fn utterance_ids(&self, utt: &Utterance) -> Vec<usize> {
        self.vocab.ids(utt.tokens())
    }

    pub fn scenario_tokens(&self, scenario: &Scenario, kind: ReprKind) -> ScenarioTokens {
        let r = render_tokens(scenario, kind, &self.registry);
        ScenarioTokens {
            ids: self.vocab.ids(&r.tokens),
            var_positions: r.var_positions,
        }
    }

    pub fn encode_utterances(&self, g: &mut Graph, ids: &[Vec<usize>]) -> Result<Encoded> {
        encode(g, &self.store, &self.utterance_encoder, ids)
    }

    pub fn encode_scenarios(&self, g: &mut Graph, ids: &[Vec<usize>]) -> Result<Encoded> {
        encode(g, &self.store, &self.scenario_encoder, ids)
    }

    fn body_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Hex SHA-256 of the serialized model (config, vocab, registry, parameters, metadata).
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.body_json()?.as_bytes())))
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let file = CheckpointFile {
            sha256: self.hash()?,
            model: self.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        let computed = file.model.hash()?;
        if computed != file.sha256 {
            return Err(Error::CheckpointHash {
                recorded: file.sha256,
                computed,
            });
        }
        file.model.config.validate()?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_json()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                return Error::MissingArtifact(format!("checkpoint {}", path.display()));
            }
            Error::io(path.display().to_string(), e)
        })?;
        Self::from_checkpoint_json(&text)
    }
}
