//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Geometry description cannot produce a valid unit cell.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// A physical or numerical parameter is out of its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Linear solver failed to reach the requested residual.
    #[error("linear solver did not converge: residual {residual:.3e} after {iterations} iterations ({context})")]
    LinearSolve {
        residual: f64,
        iterations: usize,
        context: String,
    },

    /// Nonlinear fixed-point iteration did not converge.
    #[error("nonlinear iteration diverged: residual {residual:.3e} after {iterations} outer iterations")]
    Diverged { residual: f64, iterations: usize },

    /// Corrector passed to an operation does not match the requested direction.
    #[error("direction mismatch: expected corrector for axis {expected}, got axis {got}")]
    DirectionMismatch { expected: usize, got: usize },

    /// Fields or grids from incompatible discretizations were combined.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Input file could not be parsed.
    #[error("malformed input: {0}")]
    MalformedInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
