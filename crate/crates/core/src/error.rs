use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid kernel: {}", .0.join("; "))]
    InvalidKernel(Vec<String>),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("integration failed at t={t} in stage {stage}: non-finite value")]
    Integration { t: f64, stage: usize },

    #[error("time {t} outside trajectory range [{start}, {end}]")]
    TimeOutOfRange { t: f64, start: f64, end: f64 },

    #[error("particle index {index} out of range for N={n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("hypothesis not applicable: {0}")]
    NotApplicable(String),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("instance too large for exhaustive oracle: {0} scaled atoms per side (max {1})")]
    OracleTooLarge(u64, u64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
