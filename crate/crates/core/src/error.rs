use thiserror::Error;

/// Errors raised by the design library.
#[derive(Debug, Error)]
pub enum DesignError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid covariates: {0}")]
    InvalidCovariates(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("group {group} is empty")]
    EmptyGroup { group: usize },

    #[error("matrix is not positive definite (eigenvalue {eigenvalue:e})")]
    NotPositiveDefinite { eigenvalue: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("bandwidth tag mismatch: gram built with {gram}, bandwidth is {bandwidth}")]
    BandwidthMismatch { gram: u64, bandwidth: u64 },

    #[error("too many units for a dense gram: {n} > cap {cap}")]
    TooManyUnits { n: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rank deficient design matrix (dependent columns {columns:?})")]
    RankDeficient { columns: Vec<usize> },

    #[error("complete separation detected after {iterations} iterations (coefficient norm {norm:.3e})")]
    Separation { iterations: usize, norm: f64 },

    #[error("logistic fit did not converge in {iterations} iterations (gradient {gradient:.3e})")]
    NotConverged { iterations: usize, gradient: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("state error: {0}")]
    State(String),

    #[error("csv error at row {row}, column {column}: {message}")]
    Csv { row: usize, column: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DesignError>;
