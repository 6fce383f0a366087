use thiserror::Error;

use crate::metrics::Metrics;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("non-finite gradient in `{name}` at offset {offset}")]
    NonFiniteGradient { name: String, offset: usize },

    #[error("backward called on a graph that was already consumed; run a fresh forward pass")]
    StaleGraph,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("head mode mismatch: {0}")]
    Mode(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checkpoint was written for a different model config (expected hash {expected}, checkpoint has {found})")]
    ConfigMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        partial: Box<Metrics>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
