use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Ingest { path: PathBuf, line: u64, message: String },

    #[error("no events in {0}")]
    NoEvents(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("node {node} out of range (graph has {num_nodes} nodes)")]
    NodeOutOfRange { node: usize, num_nodes: usize },

    #[error("duplicate node {0} in one memory write")]
    DuplicateNode(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("negative time delta {0}")]
    NegativeDelta(f64),

    #[error("batch is not in chronological order at event {0}")]
    NotChronological(usize),

    #[error("negative sampling pool is empty")]
    EmptyNegativePool,

    #[error("history of length {len} exceeds restarter capacity {max}")]
    HistoryTooLong { len: usize, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged in the batch starting at event {batch}: loss {loss}")]
    Diverged { batch: usize, loss: f64 },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("cache format error: {0}")]
    Format(String),

    #[error("worker {worker} failed: {message}")]
    Worker { worker: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by user input (bad files, bad configuration),
    /// as opposed to internal faults.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Ingest { .. }
                | Error::NoEvents(_)
                | Error::Config(_)
                | Error::NodeOutOfRange { .. }
                | Error::Checkpoint(_)
                | Error::Format(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Eval(_)
                | Error::Metric(_)
        )
    }
}
