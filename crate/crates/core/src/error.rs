use std::path::PathBuf;

use crate::nn::ParamVector;

/// Errors surfaced by the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parameter layout mismatch: {0}")]
    Layout(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training produced a non-finite loss or gradient. Carries the last
    /// parameters that were known to be finite.
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<ParamVector>,
    },

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Binary dataset parse failures. Each class of defect is its own variant.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated payload: {missing} bytes missing")]
    Truncated { missing: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("invalid geometry: {0}")]
    Geometry(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
