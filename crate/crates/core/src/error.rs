use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("token error: {0}")]
    Token(String),

    #[error("instruction error: {0}")]
    Instruction(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("init error: {0}")]
    Init(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {reason}")]
    Divergence {
        step: usize,
        reason: String,
        snapshot: Option<PathBuf>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
