use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("taping is disabled on this graph")]
    TapingDisabled,
    #[error("op `{0}` is not differentiable")]
    NotDifferentiable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parameter `{0}` not found")]
    MissingParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<S: Into<String>>(op: &'static str, detail: S) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}
