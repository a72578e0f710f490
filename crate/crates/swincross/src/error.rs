use thiserror::Error;

use crate::tensor::DType;

/// Errors surfaced by the tensor engine and the model layers built on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: dtype mismatch between {lhs:?} and {rhs:?}")]
    DTypeMismatch {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("backward requires a scalar loss, got {elements} elements")]
    NonScalarLoss { elements: usize },

    #[error("backward graph already consumed; rebuild the forward pass")]
    GraphConsumed,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("volume format error: {0}")]
    VolumeFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            message: message.into(),
        }
    }
}
