//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's preconditions (bad ranges, unknown ids, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A NaN or Inf was produced where only finite values are allowed.
    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    /// A serialized artifact (checkpoint, mask, config) is malformed.
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
