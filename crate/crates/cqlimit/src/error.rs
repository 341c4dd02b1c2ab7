use thiserror::Error;

pub type Result<T> = std::result::Result<T, CqError>;

#[derive(Debug, Error)]
pub enum CqError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("ill-posed deconvolution: {0}")]
    IllPosed(String),
    #[error("field not resolved: {0}")]
    Unresolved(String),
    #[error("numerical instability: {0}")]
    Instability(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
