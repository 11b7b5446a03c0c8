use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: String, detail: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("segmentation error: {0}")]
    Segmentation(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("gradient error: {0}")]
    Gradient(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }
}
