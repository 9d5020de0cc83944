use thiserror::Error;

use crate::problems::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("infeasible tour: {0}")]
    Infeasible(Violation),
    #[error("illegal action {action}: masked in the current state")]
    IllegalAction { action: usize },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("instance too large for {solver}: {size} > {limit}")]
    SizeLimit {
        solver: &'static str,
        size: usize,
        limit: usize,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
