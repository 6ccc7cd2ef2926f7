use thiserror::Error;

/// Errors raised by the sequence-design core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),
    #[error("infeasible request: {0}")]
    Infeasible(String),
    #[error("degenerate landscape: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
