use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{what} index {index} out of range (len {len})")]
    InvalidIndex {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("atom pool exhausted: need {needed} atoms for the formulas, pool has {available}")]
    PoolExhausted { needed: usize, available: usize },

    #[error(
        "rejection budget exceeded after {attempts} attempts ({accepted} accepted, acceptance rate {rate:.4})"
    )]
    RejectionBudget {
        attempts: usize,
        accepted: usize,
        rate: f64,
    },

    #[error("profile error: {0}")]
    Profile(String),

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: &'static str },

    #[error("training diverged in epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unsupported version {found:?}; supported: {supported:?}")]
    Version {
        found: String,
        supported: Vec<String>,
    },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("malformed image file: {0}")]
    Format(String),

    #[error("operation `{op}` not allowed in state {state}")]
    State { op: &'static str, state: String },

    #[error("invalid feedback field `{field}`: {message}")]
    Feedback { field: &'static str, message: String },

    #[error("missing experiment summaries: {}", display_paths(.0))]
    MissingSummaries(Vec<PathBuf>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}
