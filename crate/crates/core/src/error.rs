//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("payload length mismatch: header says {header} values, payload holds {payload}")]
    PayloadMismatch { header: usize, payload: usize },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("ground-truth label offered to an eval-mode pipeline")]
    LabelLeakage,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss in term `{term}` (value {value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
