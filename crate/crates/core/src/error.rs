use thiserror::Error;

use crate::netgraph::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology:\n{0}")]
    InvalidTopology(ValidationReport),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value at node `{node}`")]
    NonFinite { node: String },

    #[error("non-finite weight on edge {edge}")]
    NonFiniteWeight { edge: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("labels are required for this operation")]
    MissingLabels,

    #[error("degenerate normalization at node `{node}` (gamma^2 = {gamma_sq:e})")]
    DegenerateNormalization { node: String, gamma_sq: f64 },

    #[error("path count {count} exceeds limit {limit}")]
    PathLimit { count: u128, limit: usize },

    #[error("test point is inadmissible: {0}")]
    InadmissiblePoint(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
