use thiserror::Error;

/// Errors produced by the retrieval training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("token id {id} out of range for vocabulary of size {dim}")]
    TokenOutOfRange { id: u32, dim: usize },

    #[error("cannot encode an empty token sequence")]
    EncodeEmpty,

    #[error("dimension mismatch: query dim {query} vs index dim {index}")]
    DimMismatch { query: usize, index: usize },

    #[error("index build error: {0}")]
    IndexBuild(String),

    #[error("index file error: {0}")]
    IndexFile(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("environment transport error: {0}")]
    Transport(String),

    #[error("environment scoring error: {0}")]
    Scoring(String),

    #[error("stale forward cache: {0}")]
    StaleTrace(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("query {0} has no usable training pair")]
    SkipQuery(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
