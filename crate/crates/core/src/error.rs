use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid location: {0}")]
    InvalidLocation(String),

    #[error("invalid edge: {0}")]
    InvalidEdge(String),

    #[error("{what} {value} is outside the vocabulary (limit {limit})")]
    OutOfVocabulary { what: &'static str, value: usize, limit: usize },

    #[error("invalid world change: {0}")]
    InvalidWorldChange(String),

    #[error("no query of any kind can be drawn from this environment")]
    NoQueryAvailable,

    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: u32 },

    #[error("checkpoint is truncated or corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint does not match the model configuration: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("malformed metrics record on line {line}: {message}")]
    MalformedMetrics { line: usize, message: String },

    #[error("analysis precondition failed: {0}")]
    Analysis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
