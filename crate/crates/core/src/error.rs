use nalgebra::Vector3;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A linear system without a unique solution. `rank` and `sigma_min`
    /// describe the offending matrix; `null_space` holds an orthonormal basis
    /// of its kernel when one was computed.
    #[error("ill-posed system: rank {rank} < {required} (sigma_min = {sigma_min:e})")]
    IllPosed {
        rank: usize,
        required: usize,
        sigma_min: f64,
        null_space: Vec<Vec<f64>>,
    },

    #[error("point {point:?} lies outside the chart")]
    OutOfDomain { point: Vec<f64> },

    #[error("degenerate frame at node {node:?} (condition {condition:e} > {bound:e})")]
    DegenerateFrame {
        node: Vec<f64>,
        condition: f64,
        bound: f64,
    },

    #[error("frame is not involutive enough to integrate (defect {defect:e} > {threshold:e})")]
    NotInvolutive { defect: f64, threshold: f64 },

    #[error("no root found: best residual {best_residual:e}")]
    NotFound { best_residual: f64 },

    #[error("ambiguous: {} distinct roots", roots.len())]
    Ambiguous { roots: Vec<Vector3<f64>> },

    #[error("division impossible: transported element has sigma_min {sigma_min:e}")]
    NoDivision { sigma_min: f64 },

    #[error("fit diverged at iteration {iteration}: loss {loss:e} (initial {initial:e})")]
    FitDiverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
