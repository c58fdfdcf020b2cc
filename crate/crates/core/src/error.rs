use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents are incompatible with the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A primitive produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// An argument is outside its valid domain (e.g. a non-positive step size).
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// Backward was requested from a node that is not a scalar.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A tape node references a node recorded after itself.
    #[error("tape node {node} references later node {parent}")]
    CyclicTape { node: usize, parent: usize },

    /// A named parameter is missing, duplicated, unexpected or mis-shaped.
    #[error("parameter {name}: {detail}")]
    Parameter { name: String, detail: String },

    /// Checkpoint bytes are malformed or fail integrity checks.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Configuration text could not be parsed or validated.
    #[error("config: {0}")]
    Config(String),

    /// Training diverged.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    /// Filesystem failure (message only, so the error stays `Clone`).
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
