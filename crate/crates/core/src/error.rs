use std::path::PathBuf;

use thiserror::Error;

use crate::adapt::AdaptReport;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric overflow in {location}")]
    NumericOverflow { location: String },

    /// A loss or gradient term became non-finite.
    #[error("non-finite value in {term}")]
    Numeric { term: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("unreachable architecture at student layer {position}: {reason}")]
    Plan { position: usize, reason: String },

    #[error("class coverage: {domain} domain has no samples for classes {missing:?}")]
    Coverage { domain: String, missing: Vec<usize> },

    #[error("learning rate underflow after {} iterations", report.records.len())]
    Convergence { report: Box<AdaptReport> },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    ParseLine { line: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
