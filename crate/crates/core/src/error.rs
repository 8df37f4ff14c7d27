use thiserror::Error;

#[derive(Debug, Error)]
pub enum SqrError {
    #[error("invalid kernel specification: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate model: effective dimension {df} is not below the {nm} observations")]
    Degenerate { df: usize, nm: usize },

    #[error("fit at tau index {index} (tau = {tau}) failed: {source}")]
    AtTau {
        index: usize,
        tau: f64,
        #[source]
        source: Box<SqrError>,
    },

    #[error("matrix is not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("{0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, SqrError>;
