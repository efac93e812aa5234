use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{what}: quadrature did not reach tolerance (achieved error {achieved:.3e}, requested {requested:.3e})")]
    Tolerance {
        what: String,
        achieved: f64,
        requested: f64,
        /// Best value available when the routine gave up.
        partial: f64,
    },

    #[error("estimator `{estimator}` failed on path {path}: {reason}")]
    Estimator { estimator: &'static str, path: usize, reason: String },

    #[error("inadmissible strategy at path {path}, step {step}: fraction {fraction}")]
    Admissibility { path: usize, step: usize, fraction: f64 },

    #[error("path dump: {0}")]
    Dump(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
