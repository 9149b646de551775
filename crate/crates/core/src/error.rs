use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error(
        "least-squares system for order {order} is ill-conditioned (condition number {condition:.3e}); \
         use a longer filter (larger half-length) or a lower derivative order"
    )]
    IllConditioned { order: usize, condition: f64 },

    #[error("inverse PSF spectrum is not finite at omega = {omega} rad/sample")]
    NonFiniteSpectrum { omega: f64 },

    #[error("fit did not converge after {iterations} iterations (residual {residual:.6e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
