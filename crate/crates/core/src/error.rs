use std::fmt;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward: loss is not attached to a tape")]
    NoTape,
    #[error("backward: graph was already backpropagated; rebuild the forward pass")]
    BackwardTwice,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl fmt::Display) -> Error {
    Error::InvalidArgument(msg.to_string())
}
