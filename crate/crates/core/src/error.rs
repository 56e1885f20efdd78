use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("node `{node}`: {reason}")]
    Shape { node: String, reason: String },

    #[error("graph contains a cycle through {0:?}")]
    Cycle(Vec<String>),

    #[error("rules line {line}: {message}")]
    Rules { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data row {row}, column `{column}`: {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("search budget of {0} steps is exhausted")]
    BudgetExhausted(usize),

    #[error("space has {count} candidates, over the cap of {cap}")]
    SpaceTooLarge { count: String, cap: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short code used in CLI error lines and mapped onto FFI status codes.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::InvalidGraph(_) | Error::Shape { .. } | Error::Cycle(_) => "graph",
            Error::Rules { .. } => "rules",
            Error::InvalidArgument(_) => "argument",
            Error::Data { .. } | Error::Csv(_) => "data",
            Error::Dimension(_) => "dimension",
            Error::BudgetExhausted(_) => "budget",
            Error::SpaceTooLarge { .. } => "space",
            Error::Checkpoint(_) => "checkpoint",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
