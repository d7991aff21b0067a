use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MieError>;

/// Every failure the engine can report.
///
/// `category()` gives a stable machine-readable tag used by the CLI for its
/// exit-code table.
#[derive(Debug, Error)]
pub enum MieError {
    #[error("shape error: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax row {row} is entirely -inf")]
    DegenerateRow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("bad checkpoint magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("context overflow: {len} tokens exceeds n_ctx {n_ctx}")]
    ContextOverflow { len: usize, n_ctx: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("anchor `{anchor}` cannot be resolved in this prompt")]
    UnresolvableAnchor { anchor: String },

    #[error("intervention query position {query} precedes key position {key}")]
    Causality { query: usize, key: usize },

    #[error("invalid dataset entry {index}: {reason}")]
    Validation { index: usize, reason: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MieError {
    pub fn contract(msg: impl Into<String>) -> Self {
        MieError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MieError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            MieError::Shape { .. }
            | MieError::Contract(_)
            | MieError::ContextOverflow { .. }
            | MieError::InvalidToken { .. }
            | MieError::UnresolvableAnchor { .. }
            | MieError::Causality { .. } => "contract",
            MieError::DegenerateRow { .. }
            | MieError::NoConvergence { .. }
            | MieError::Divergence { .. } => "numerical",
            MieError::BadMagic { .. }
            | MieError::UnsupportedVersion { .. }
            | MieError::TensorShape { .. }
            | MieError::Truncated { .. }
            | MieError::Format(_)
            | MieError::Parse(_)
            | MieError::Json(_) => "format",
            MieError::Validation { .. } => "validation",
            MieError::Io { .. } => "io",
        }
    }
}
