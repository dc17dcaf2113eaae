//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor or image dimensions do not match what an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A projection hit a degenerate configuration (e.g. |z| ~ 0).
    #[error("degenerate geometry: {0}")]
    Geometry(String),

    /// Input data failed schema validation (maps, labels, configs).
    #[error("schema error: {0}")]
    Schema(String),

    /// Checkpoint incompatible with the requested architecture.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }
}
