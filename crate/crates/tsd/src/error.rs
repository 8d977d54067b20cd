use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Domain(String),
    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String, last: Vec<f64> },
    #[error("no critical point: {0}")]
    NoCriticalPoint(String),
    #[error("did not converge: {0}")]
    Convergence(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("quadrature tail bound exceeds tolerance: {0}")]
    Tail(String),
    #[error("orbit left the sphere after {iterates} returns (normal distance {distance:e})")]
    Escape { iterates: usize, distance: f64 },
}

impl Error {
    /// Errors caused by bad input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Domain(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
