use thiserror::Error;

/// Errors raised by tensor arithmetic, the autodiff tape, and model assembly.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}: every extent must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("probability row {row} sums to {sum}, expected 1")]
    NotADistribution { row: usize, sum: f64 },
    #[error("operation requires phase {expected}, model is in {actual}")]
    PhaseMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("parameter `{0}` not found")]
    UnknownParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
