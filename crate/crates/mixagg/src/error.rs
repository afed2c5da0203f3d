//! Crate-wide error type.

/// Errors raised by tensor kernels, model code, training, retrieval and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor dimensions incompatible with the requested operation.
    #[error("shape error in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// An API contract was violated (non-scalar backward root, zero-norm
    /// normalization input, missing mixer blocks, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A hyperparameter or configuration value is out of its valid range.
    #[error("parameter error: {0}")]
    Param(String),

    /// Input data is structurally invalid (duplicate ids, missing places,
    /// out-of-range coordinates, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A text file failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A binary payload has the wrong magic, version, or is truncated.
    #[error("format error: {0}")]
    Format(String),

    /// A computation produced or received a NaN/Inf where finite values are
    /// required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::Shape {
            op,
            details: details.into(),
        }
    }
}
