use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("shape error: {0}")]
    Shape(String),

    /// A masked softmax row with every entry masked out.
    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid lattice: {0}")]
    Lattice(String),

    #[error("invalid label sequence: {0}")]
    Labels(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed corpus record; `line` is 1-based.
    #[error("{path}:{line}: {msg}")]
    Record { path: String, line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("instance too large for enumeration: {0} sequences")]
    TooLarge(u128),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::FullyMasked { .. })
    }
}
