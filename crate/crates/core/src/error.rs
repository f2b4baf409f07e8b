//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("position {0} is already conditioned")]
    AlreadyConditioned(usize),

    #[error("no unconditioned positions remain")]
    FullyConditioned,

    #[error("materialization of {size} entries exceeds limit {limit}")]
    MaterializeLimit { size: usize, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("Markov chain is not ergodic: {0}")]
    NonErgodic(String),

    #[error("unknown character {0:?} in input text")]
    UnknownCharacter(char),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("corpus format error: {0}")]
    CorpusFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
