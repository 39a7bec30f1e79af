use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward called without a cached forward pass")]
    NoForwardCache,

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible constraint: {0}")]
    Infeasible(String),

    #[error("benchmark format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
