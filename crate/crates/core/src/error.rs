use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments violating its contract
    /// (shape mismatch, stepping a finished episode, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
