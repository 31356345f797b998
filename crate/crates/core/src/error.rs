//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration detected before any compute.
    #[error("config error: {0}")]
    Config(String),

    /// Bad or inconsistent data (manifests, vocabularies, captions, labels).
    #[error("data error: {0}")]
    Data(String),

    /// Shape mismatch between tensors.
    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// A cosine similarity was requested for a zero-norm vector.
    #[error("degenerate feature: zero-norm vector in cosine similarity")]
    DegenerateFeature,

    /// Training diverged or produced a non-finite loss.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint archive is malformed or from an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
