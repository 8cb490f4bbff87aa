use thiserror::Error;

#[derive(Debug, Error)]
pub enum StraError {
    #[error("shape mismatch in {op}: {dim} expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("numerical failure in {op}: {reason}")]
    Numerical { op: &'static str, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StraError>;

pub(crate) fn shape_err(op: &'static str, dim: impl Into<String>, expected: usize, actual: usize) -> StraError {
    StraError::Shape {
        op,
        dim: dim.into(),
        expected,
        actual,
    }
}

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> StraError {
    StraError::Invalid {
        op,
        reason: reason.into(),
    }
}
