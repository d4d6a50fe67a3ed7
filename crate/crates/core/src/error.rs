use thiserror::Error;

use crate::training::TrainRecord;

/// Errors raised by the laboratory's numerical routines.
#[derive(Debug, Error)]
pub enum IclError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular covariance: smallest eigenvalue {min_eig:e} vs largest {max_eig:e}")]
    SingularCovariance { min_eig: f64, max_eig: f64 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite entries appeared at layer {layer}")]
    NonFinite { layer: usize },

    #[error("closed form unavailable: {0}")]
    ClosedFormUnavailable(&'static str),

    #[error("initialization outside contraction region: ||M0 S - I|| = {0}")]
    OutsideContraction(f64),

    #[error("regime violation: {0}")]
    Regime(String),

    #[error("ill-conditioned fit ({0}); use higher precision or smaller L")]
    IllConditioned(String),

    #[error("training aborted at step {step}: non-finite loss")]
    Diverged {
        step: usize,
        history: Box<Vec<TrainRecord>>,
    },
}

pub type Result<T> = std::result::Result<T, IclError>;
