use thiserror::Error;

/// Error type shared across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("unsupported dimension {0}: expected 2 or 3")]
    UnsupportedDimension(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("body too close to the container wall: gap {gap:.6e} < delta0 {delta0:.6e}")]
    Proximity { gap: f64, delta0: f64 },

    #[error("map inversion failed after {iters} Newton iterations (residual {residual:.3e})")]
    InversionFailure { iters: usize, residual: f64 },

    #[error("flow map node left the container at t = {t:.6e} (|x| = {radius:.6e})")]
    MapBlowup { t: f64, radius: f64 },

    #[error("linear solver did not converge: relative residual {residual:.3e} after {iters} iterations")]
    SolverDiverged { residual: f64, iters: usize },

    #[error("CFL violation: dt = {dt:.6e} exceeds limit {limit:.6e}; retry with dt <= {limit:.6e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("point outside the grid: {0}")]
    OutOfDomain(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
