use thiserror::Error;

use crate::trainer::TrainReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of range (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("score-derived labels need a scored_pair record")]
    MissingScore,

    #[error("unsupported form: {0}")]
    UnsupportedForm(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Training produced a non-finite loss or gradient. `partial` holds every
    /// row logged before the failure.
    #[error("numerical failure at step {step}: {detail}")]
    NumericalFailure {
        step: usize,
        detail: String,
        partial: Box<TrainReport>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidRecord(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
