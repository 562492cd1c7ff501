use thiserror::Error;

/// Errors raised by the tensor engine and the autodiff graph.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("non-finite value at node {node}")]
    NonFinite { node: String },
}

impl TensorError {
    pub fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        TensorError::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

/// Crate-level error covering the model, training pipeline, and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("training aborted: {0}")]
    Train(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
