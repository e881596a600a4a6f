use thiserror::Error;

/// Errors produced by model construction, solving, simulation, and fitting.
#[derive(Error, Debug)]
pub enum Error {
    /// A scalar parameter is outside its admissible range. The message names
    /// the violated inequality.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// The forward-Euler discretization would be unstable or non-physical.
    #[error("unstable discretization: {0}")]
    UnstableDiscretization(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// The effort Hessian lost rank during a backward pass.
    #[error("effort Hessian singular or indefinite at step {step}")]
    SingularEffortHessian { step: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// A Monte-Carlo rollout produced a non-finite state.
    #[error("trial {trial} produced a non-finite state at step {step}")]
    TrialDiverged { trial: usize, step: usize },
    #[error("ensemble error: {0}")]
    Ensemble(String),
    /// A data file violated the expected schema. `line` is 1-based and counts
    /// the header.
    #[error("data format error at line {line}: {message}")]
    DataFormat { line: usize, message: String },
    #[error("identification error: {0}")]
    Identification(String),
    #[error("synthesis error: {0}")]
    Synthesis(String),
    #[error("human policy did not converge (residual {residual:.3e}); refusing to synthesize")]
    PolicyNotConverged { residual: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
