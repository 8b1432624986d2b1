//! Adversarial Turing Test at desk scale.
//!
//! A discriminator that ranks human dialogue responses above machine ones is
//! hardened by an iterative attack-defense game: policy-gradient attackers are
//! trained to fool it, their outputs are harvested into adversarial datasets,
//! and the discriminator is re-trained on the union of everything seen so far.
//!
//! Module map:
//!
//! | module       | contents                                                   |
//! |--------------|------------------------------------------------------------|
//! | [`corpus`]   | synthetic dialogue world, JSONL ingestion, splits          |
//! | [`numerics`] | parameter vectors, SGD, sampling, RNG, finite differences  |
//! | [`models`]   | generator / scorer contracts and tiny reference models     |
//! | [`training`] | pairwise loss, rewards, policy gradient, training steps    |
//! | [`game`]     | the attack-defense orchestrator and its baselines          |
//! | [`evalkit`]  | attackers, pairwise accuracy, diversity metrics            |
//! | [`run`]      | run configuration, run directories and command drivers     |

pub mod corpus;
pub mod evalkit;
pub mod game;
pub mod models;
pub mod numerics;
pub mod run;
pub mod training;

use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("stale rollout: log-probs computed at parameter version {rollout}, generator is at {current}")]
    StaleRollout { rollout: u64, current: u64 },

    #[error("inseparable corpus: pre-trained discriminator reached accuracy {accuracy:.3} on A(0), needs at least {required:.3}")]
    InseparableCorpus { accuracy: f64, required: f64 },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub use corpus::{Corpus, Dialogue, Split, SynthWorldSpec, TokenId, Utterance, Vocab};
pub use numerics::{Gradient, OptimizerState, ParamVector, RngStream};
