use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered: {0}")]
    Numeric(String),
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:e}, tolerance {tol:e})")]
    NotPsd { min_eig: f64, tol: f64 },
    #[error("ill-posed projection: {0}")]
    IllPosedProjection(String),
    #[error("Riccati solution diverged at t = {time} (norm {norm:e} exceeds {limit:e})")]
    Divergence { time: f64, norm: f64, limit: f64 },
    #[error("time {0} is not a node of the trajectory grid")]
    OffGrid(f64),
    #[error("operation requires the BNS subclass (no Gamma, no state-dependent jumps): {0}")]
    ModelClass(String),
    #[error("damping parameter eta = {0} must exceed 1")]
    Damping(f64),
    #[error("Fourier quadrature failed: {0}")]
    Quadrature(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
