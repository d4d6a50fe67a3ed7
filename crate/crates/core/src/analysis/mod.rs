//! Executable probes of the depth lower bounds, adaptive termination,
//! out-of-distribution behavior and depth monotonicity.

mod alternation;
mod degree;
mod monotonicity;
mod ood;
mod scaling;
mod termination;

pub use alternation::{chebyshev_alternation_check, AlternationCertificate};
pub use degree::{degree_oracle, DegreeReport, FIT_INTERVAL};
pub use monotonicity::{looped_tail_check, monotonicity_probe, MonotonicityReport, TailCheck, Witness};
pub use ood::{
    blowup_train_distribution, looped_robustness_experiment, multilayer_blowup_experiment, BlowupReport,
    RobustnessOptions, RobustnessReport,
};
pub use scaling::{
    relative_error_at, sample_nondegenerate_instance, scaling_adversary, scaling_adversary_with, GridSpacing,
    ScalingOptions, ScalingSearchResult, BAD_THRESHOLD, NONDEGENERATE_TOL,
};
pub use termination::{termination_monitor, TerminationReport};

use crate::attention::{forward_full_on, run_restricted, FullWeights, RestrictedWeights};
use crate::error::{IclError, Result};
use crate::instances::RegressionInstance;

/// Either weight family, for probes that only need forward passes.
#[derive(Debug, Clone, Copy)]
pub enum Model<'a> {
    Restricted(&'a RestrictedWeights),
    Full(&'a FullWeights),
}

impl Model<'_> {
    pub fn is_restricted(&self) -> bool {
        matches!(self, Model::Restricted(_))
    }

    pub fn d(&self) -> usize {
        match self {
            Model::Restricted(w) => w.d(),
            Model::Full(w) => w.d(),
        }
    }

    /// The raw final query entry `y_q^{(L)}`.
    pub fn raw_query(&self, inst: &RegressionInstance, depth: usize) -> Result<f64> {
        match self {
            Model::Restricted(w) => run_restricted(inst, w, depth, |_, _, _| {}),
            Model::Full(w) => {
                if depth != w.depth() {
                    return Err(IclError::InvalidArgument(format!(
                        "full weights have {} layers but depth {depth} was requested",
                        w.depth()
                    )));
                }
                forward_full_on(inst, w).map(|o| o.raw_query())
            }
        }
    }

    pub fn predict(&self, inst: &RegressionInstance, depth: usize) -> Result<f64> {
        self.raw_query(inst, depth).map(|q| -q)
    }

    /// Degree bound of `gamma -> y_q^{(L)}(gamma X, gamma y, x_q)`:
    /// `2L` restricted, `3^L` unrestricted.
    pub fn degree_bound(&self, depth: usize) -> usize {
        match self {
            Model::Restricted(_) => 2 * depth,
            Model::Full(_) => 3usize.saturating_pow(depth as u32),
        }
    }
}
