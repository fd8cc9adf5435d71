use std::path::PathBuf;

use thiserror::Error;

use crate::planner::OpKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("missing statistics for table `{0}`")]
    MissingStats(String),

    #[error("missing table `{0}`")]
    MissingTable(String),

    #[error("statistics generation regression: current {current} < captured {captured}")]
    GenerationRegression { current: u64, captured: u64 },

    #[error("negative cardinality {0}")]
    NegativeCardinality(f64),

    #[error("rank-deficient fit: need at least two distinct input sizes")]
    RankDeficient,

    #[error("no break-even for {0}: accelerator slope is not below cpu slope")]
    NoBreakEven(OpKind),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("memory budget exhausted at node {node}: working set {bytes} bytes > budget {budget} bytes")]
    MemoryExhausted { node: usize, bytes: u64, budget: u64 },

    #[error("result mismatch on query {query}: {detail}")]
    ResultMismatch { query: usize, detail: String },

    #[error("{path}: {source}")]
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
}
