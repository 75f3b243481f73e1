use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid document {doc_id}: {}", violations.join("; "))]
    InvalidDocument {
        doc_id: String,
        violations: Vec<String>,
    },

    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    #[error("invalid forest: {0}")]
    InvalidForest(String),

    #[error("malformed tree: {0}")]
    MalformedTree(String),

    #[error("unknown relation type {0:?}")]
    UnknownRelation(String),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("layout infeasible after {attempts} attempts: {detail}")]
    InfeasibleLayout { attempts: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corpus schema: {0}")]
    Schema(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {reason}", path.display())]
    Io { path: PathBuf, reason: std::io::Error },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            reason: source,
        }
    }
}
