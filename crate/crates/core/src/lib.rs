//! Scenario-based semantic parsing: retrieve an intent-slot scenario for an
//! utterance with a bi-encoder, then fill its variables with utterance spans.

pub mod bank;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod filler;
pub mod frame;
pub mod model;
pub mod negatives;
pub mod repr;
pub mod retrieval;
pub mod serve;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
