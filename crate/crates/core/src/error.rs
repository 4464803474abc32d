use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("operand shape mismatch: {left} vs {right} units")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unknown concept: {0}")]
    MissingConcept(String),

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite activation for neuron {neuron} at index {index}")]
    NonFinite { neuron: u32, index: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("candidate budget exceeded: {needed} candidates > budget {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("bad container magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported container version {found} (supported: {supported})")]
    BadVersion { found: u32, supported: u32 },

    #[error("size mismatch in blob {blob}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        blob: String,
        expected: u64,
        actual: u64,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::LengthMismatch { .. } | Error::Shape(_) => 10,
            Error::MissingConcept(_) | Error::InvalidOperator(_) | Error::Parse { .. } => 11,
            Error::Data(_) => 12,
            Error::NonFinite { .. } => 13,
            Error::Config(_) | Error::BudgetExceeded { .. } => 14,
            Error::Degenerate(_) | Error::UndefinedCorrelation(_) => 15,
            Error::BadMagic { .. } => 20,
            Error::BadVersion { .. } => 21,
            Error::SizeMismatch { .. } => 22,
            Error::Format(_) | Error::Json(_) | Error::Csv(_) => 23,
            Error::Io { .. } => 30,
        }
    }
}
