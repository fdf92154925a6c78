use thiserror::Error;

#[derive(Debug, Error)]
pub enum DlrtError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{op} did not converge after {iterations} iterations")]
    NoConvergence { op: &'static str, iterations: usize },

    #[error("invalid rank: {0}")]
    InvalidRank(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DlrtError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> DlrtError {
    DlrtError::Dimension {
        op,
        detail: detail.into(),
    }
}
