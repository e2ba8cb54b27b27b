use std::path::PathBuf;

use thiserror::Error;

use crate::graph::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },

    #[error("graph invalid: {}", .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Validation(Vec<Violation>),

    #[error("graph contains a cycle through node {node}")]
    Cycle { node: usize },

    #[error("node index {index} out of range for graph with {len} nodes")]
    Index { index: usize, len: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("infeasible instance: {0}")]
    InfeasibleInstance(String),

    #[error("state error: {0}")]
    State(String),

    #[error("placement incomplete: node {node} unassigned")]
    IncompletePlacement { node: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("dead end: every location is masked")]
    DeadEnd,

    #[error("non-finite gradient at iteration {iter} (norm {norm})")]
    NonFiniteGradient { iter: usize, norm: f64 },

    #[error("every evaluation rollout aborted")]
    NoFeasibleSample,

    #[error("search space too large: {size} exceeds limit {limit}")]
    TooLarge { size: String, limit: u64 },

    #[error("objective returned a non-finite value at coordinate {coord}")]
    NonFiniteValue { coord: usize },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Stable short code used in CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::Parse { .. } => "ParseError",
            Error::Validation(_) => "ValidationError",
            Error::Cycle { .. } => "CycleError",
            Error::Index { .. } => "IndexError",
            Error::InvalidParams(_) => "InvalidParams",
            Error::InfeasibleInstance(_) => "InfeasibleInstance",
            Error::State(_) => "StateError",
            Error::IncompletePlacement { .. } => "IncompletePlacement",
            Error::Dimension(_) => "DimensionError",
            Error::DeadEnd => "DeadEnd",
            Error::NonFiniteGradient { .. } => "NonFiniteGradient",
            Error::NoFeasibleSample => "NoFeasibleSample",
            Error::TooLarge { .. } => "TooLarge",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::Config(_) => "ConfigError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
