use std::io;

use thiserror::Error;

/// Errors raised anywhere in the detection and rule-learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("induction error: {0}")]
    Induction(String),
    #[error("logic error: {0}")]
    Logic(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

pub(crate) use shape_err;
