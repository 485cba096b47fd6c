use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the audit pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error in column `{column}`: {message}")]
    Schema { column: String, message: String },

    #[error("duplicate scan_id `{0}`")]
    Uniqueness(String),

    #[error("mutually exclusive labels both set on scan(s): {}", .0.join(", "))]
    Consistency(Vec<String>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("optimization failed: {message} (loss trace tail: {trace:?})")]
    Optimization { message: String, trace: Vec<f64> },

    #[error("row leakage between splits: {0}")]
    Leakage(String),

    #[error("missing group `{0}`")]
    MissingGroup(String),

    #[error("infeasible resampling cells: {}", .0.join("; "))]
    InfeasibleCells(Vec<String>),

    #[error("bootstrap replicate {index} failed: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(column: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            column: column.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
