use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("invalid tree structure: {0}")]
    Structure(String),
    #[error("cycle in head pointers involving node {0}")]
    Cycle(usize),
    #[error("head index {head} out of range for {len} tokens (node {node})")]
    HeadRange { node: usize, head: usize, len: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }
}
