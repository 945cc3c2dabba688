use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contains no tokens")]
    EmptyInput,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("token id {id} is outside a vocabulary of size {size}")]
    UnknownId { id: usize, size: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid pseudo-parallel pair: {0}")]
    InvalidPair(String),

    #[error("the lambda_rec grid is empty")]
    EmptyGrid,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("non-finite gradient during latent search at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u64, expected: u32 },

    #[error("grammar error: {0}")]
    Grammar(String),

    #[error("scorer failed: {0}")]
    Scorer(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
