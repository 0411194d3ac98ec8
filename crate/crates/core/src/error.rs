//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by geometry fitting, model evaluation, solving and simulation.
#[derive(Error, Debug)]
pub enum Error {
    #[error("spline fit error: {0}")]
    SplineFit(String),

    #[error("parameter s = {s} outside path range [0, {length}]")]
    OutOfRange { s: f64, length: f64 },

    #[error("closest-point projection failed near s = {s_guess}: {reason}")]
    Projection { s_guess: f64, reason: String },

    #[error("path-coordinate singularity at s = {s}: 1 - kappa*w1 = {margin} (w1 = {w1})")]
    Singularity { s: f64, w1: f64, margin: f64 },

    #[error("non-finite derivative in integrator stage {stage}")]
    Integration { stage: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tunnel construction error: {0}")]
    Tunnel(String),

    #[error("QP solve failed after {iterations} iterations (stationarity {stationarity:.3e}, feasibility {feasibility:.3e}, complementarity {complementarity:.3e})")]
    QpFailure {
        iterations: usize,
        stationarity: f64,
        feasibility: f64,
        complementarity: f64,
    },

    #[error("solver aborted: {0}")]
    SolverAbort(String),

    #[error("simulation diverged: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
