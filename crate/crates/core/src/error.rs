use thiserror::Error;

/// Failures raised by the geometric, flow and analysis routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("singular point: gradient norm {norm:e} is below {threshold:e}")]
    SingularPoint { norm: f64, threshold: f64 },

    #[error("retraction did not reach |c| <= {tol:e} within {iterations} iterations (|c| = {residual:e})")]
    RetractionDiverged {
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    #[error("point is outside the retraction capture region: |c| = {value:e} > {limit:e}")]
    OutsideCapture { value: f64, limit: f64 },

    #[error("no sign change of c found after {extensions} ray extensions")]
    SamplingFailed { extensions: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range for {len} agents")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("transversality violated at agent {agent}: |<x, grad c(x)>| = {value:e} < {threshold:e}")]
    TransversalityViolated {
        agent: usize,
        value: f64,
        threshold: f64,
    },

    #[error("configuration is not an equilibrium: field norm {residual:e} > {tol:e}")]
    NotEquilibrium { residual: f64, tol: f64 },

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("point is not on the surface: residual {value:e} exceeds {tol:e}")]
    NotOnSurface { value: f64, tol: f64 },

    #[error("interaction graph is not connected")]
    DisconnectedGraph,
}

pub type Result<T> = std::result::Result<T, Error>;
