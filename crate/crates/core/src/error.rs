use thiserror::Error;

/// Errors surfaced by the degradation model, estimation, and design routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Cholesky factorization hit a non-positive pivot. The index names the
    /// offending leading minor (0-based).
    #[error("matrix not positive definite at leading minor {minor}")]
    NotPositiveDefinite { minor: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
