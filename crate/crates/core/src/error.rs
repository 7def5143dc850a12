use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("distribution pool is empty")]
    EmptyPool,

    #[error("class balance >= {balance_min} not reached after {attempts} ground-truth draws")]
    BalanceUnattainable { balance_min: f64, attempts: usize },

    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: usize, what: &'static str },

    #[error("not a genome file")]
    NotGenomeFile,

    #[error("corrupt genome file: {0}")]
    Corrupt(String),

    #[error("inconsistent header: {0}")]
    InconsistentHeader(String),

    #[error("unsupported genome file version {0}")]
    UnsupportedVersion(u16),

    #[error("idx file {path}: {reason}")]
    Idx { path: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}
