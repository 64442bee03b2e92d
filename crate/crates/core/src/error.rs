use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// One or more configuration invariants are violated.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    /// Tensor shapes or spatial sizes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was called in a way its contract does not allow.
    #[error("usage error: {0}")]
    Usage(String),

    /// Every key position of an attention instance is masked.
    #[error("degenerate attention mask: sample {sample} has no unmasked key")]
    DegenerateMask { sample: usize },

    #[error("non-finite values in {0}")]
    Numeric(String),

    /// Bad input data: out-of-vocabulary ids, unknown words, overlong expressions.
    #[error("data error: {0}")]
    Data(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("checkpoint refused: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
