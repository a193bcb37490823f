use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("newton iteration did not converge after {iters} steps (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("not hyperbolic: {0}")]
    NonHyperbolic(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
