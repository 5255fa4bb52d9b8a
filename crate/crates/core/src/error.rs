use std::path::PathBuf;

use scenparse_autodiff::AutodiffError;
use thiserror::Error;

use crate::frame::ParseError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty utterance")]
    EmptyUtterance,

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("{path}:{line}: {source}")]
    Dataset {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed dataset line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("malformed ontology label `{0}`")]
    MalformedLabel(String),

    #[error("invalid registry entry on line {line}: {reason}")]
    Registry { line: usize, reason: String },

    #[error("scenario `{0}` is not in the bank")]
    UnknownScenario(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("span error: {0}")]
    Span(String),

    #[error("stale index: built for checkpoint {index}, model is {model}")]
    StaleIndex { index: String, model: String },

    #[error("checkpoint hash mismatch: recorded {recorded}, computed {computed}")]
    CheckpointHash { recorded: String, computed: String },

    #[error("invalid grammar: {0}")]
    Grammar(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Tensor(#[from] AutodiffError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable category used in CLI and service error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyUtterance => "empty_utterance",
            Error::Parse(_) | Error::Dataset { .. } | Error::MalformedLine { .. } => "parse",
            Error::MalformedLabel(_) | Error::Registry { .. } => "registry",
            Error::UnknownScenario(_) => "unknown_scenario",
            Error::Config(_) | Error::Toml(_) => "config",
            Error::Span(_) => "span",
            Error::StaleIndex { .. } | Error::CheckpointHash { .. } => "stale",
            Error::Grammar(_) => "grammar",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
