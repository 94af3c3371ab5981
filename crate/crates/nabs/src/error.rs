use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("disk budget exceeded: need {needed} bytes, budget {budget} bytes")]
    BudgetExceeded { needed: u64, budget: u64 },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("compression ineffective: exception rate {rate:.4} exceeds limit {limit:.4}")]
    CompressionIneffective { rate: f64, limit: f64 },

    #[error("soundness violation: {0}")]
    Soundness(String),

    #[error("synthesis error: {0}")]
    Synthesis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
