//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensorError {
    /// Malformed input: bad atom number, partition, dimension mismatch, ...
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A measurement failed validation (completeness, positivity, shape).
    #[error("invalid measurement: {0}")]
    Measurement(String),
    /// A solver ran out of its iteration budget before reaching tolerance.
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
}

pub type Result<T> = std::result::Result<T, SensorError>;

/// Shorthand for [`SensorError::Invalid`] construction.
pub fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SensorError::Invalid(msg.into()))
}
