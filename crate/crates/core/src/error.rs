use std::fmt;
use std::path::PathBuf;

/// A node of the bipartite network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Investor(usize),
    Asset(usize),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Investor(i) => write!(f, "investor {i}"),
            Node::Asset(m) => write!(f, "asset {m}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{field}: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("evaluation at singularity: {node} at t={t}")]
    EvaluationAtSingularity { node: Node, t: f64 },

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("network generation failed: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
