use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {what} has length {got}, expected {expected}")]
    Shape {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{solver} did not converge after {iterations} iterations (stationarity {achieved:.3e} > tol {tol:.3e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        achieved: f64,
        tol: f64,
    },

    #[error("replay buffer not ready: {0}")]
    NotReady(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            got,
            expected,
        })
    }
}
