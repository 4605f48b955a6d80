use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("read failed: {0}")]
    Stream(#[from] std::io::Error),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("missing entropy for record {record} at {position}")]
    MissingEntropy { record: String, position: String },

    #[error("probability mass {mass} exceeds 1")]
    ProbabilityMass { mass: f64 },

    #[error("missing gold answer for record {0}")]
    MissingGold(String),

    #[error("rule not applicable: {0}")]
    RuleInapplicable(String),

    #[error("correctness undecidable in cell ({model_id}, {dataset_id}): {reason}")]
    UndecidableCell {
        model_id: String,
        dataset_id: String,
        reason: String,
    },

    #[error("record {record}: {reason}")]
    Record { record: String, reason: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("validation failed with {0} error(s)")]
    Validation(usize),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for bad input data, 3 for configuration or
    /// file access problems, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io { .. } => 3,
            Error::Degenerate(_)
            | Error::Numeric(_)
            | Error::UndefinedCorrelation(_)
            | Error::Empty(_) => 4,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            3 => "config",
            4 => "numeric",
            _ => "validation",
        }
    }
}
