//! Adaptive termination: stop at the first layer whose transformed labels
//! certify a small query error.
//!
//! For linear `u = 0` weights, `w*^T x_q - prediction = y^T X^T Sigma^{-1} x_q`,
//! so `||y|| <= eps / ||x_q||_{Sigma^{-1}}` guarantees an error of at most `eps`.

use serde::Serialize;

use crate::attention::{run_restricted, Activation, RestrictedWeights};
use crate::error::{IclError, Result};
use crate::instances::RegressionInstance;
use crate::linalg::{Covariance, Vector};

#[derive(Debug, Clone, Serialize)]
pub struct TerminationReport {
    pub stop_layer: Option<usize>,
    pub guaranteed_error: f64,
    /// `eps / ||x_q||_{Sigma^{-1}}`.
    pub threshold: f64,
    /// `||y^{(l)}||` for `l = 0..` up to the stop layer (or `L_max`).
    pub label_norms: Vec<f64>,
    /// `|w*^T x_q - prediction|` at the stop layer.
    pub measured_error: Option<f64>,
    /// The same error through the cancellation-free readout `y^T X^T Sigma^{-1} x_q`.
    pub readout_error: Option<f64>,
}

impl TerminationReport {
    pub fn violated(&self) -> bool {
        self.readout_error.is_some_and(|e| e > self.guaranteed_error)
    }
}

pub fn termination_monitor(inst: &RegressionInstance, w: &RestrictedWeights, l_max: usize, eps: f64) -> Result<TerminationReport> {
    if w.activation() != Activation::Linear || !w.has_zero_u() {
        return Err(IclError::ClosedFormUnavailable("termination certificate needs linear, u = 0 weights"));
    }
    if !(eps > 0.0) {
        return Err(IclError::InvalidArgument("eps must be positive".into()));
    }
    let depth = if w.is_shared() { l_max } else { l_max.min(w.layers().len()) };
    let cov = Covariance::new(inst.sigma())?;
    // X^T Sigma^{-1} x_q
    let probe: Vector = inst.x().transpose() * (cov.inverse() * inst.x_q());
    let weighted_norm = inst.x_q().dot(&(cov.inverse() * inst.x_q())).sqrt();
    let threshold = eps / weighted_norm;

    let mut label_norms = Vec::new();
    let mut stop: Option<(usize, f64, f64)> = None;
    let w_run = if w.is_shared() { w.clone() } else { w.prefix(depth.max(1))? };
    let target = inst.target();
    let res = run_restricted(inst, &w_run, depth, |t, y, y_q| {
        if stop.is_some() {
            return;
        }
        let norm = y.norm();
        label_norms.push(norm);
        if norm <= threshold {
            stop = Some((t, (target + y_q).abs(), y.dot(&probe).abs()));
        }
    });
    match res {
        Ok(_) => {}
        // layers past the stop may overflow; the certificate is already fixed
        Err(IclError::NonFinite { .. }) if stop.is_some() => {}
        Err(e) => return Err(e),
    }
    Ok(TerminationReport {
        stop_layer: stop.map(|s| s.0),
        guaranteed_error: eps,
        threshold,
        label_norms,
        measured_error: stop.map(|s| s.1),
        readout_error: stop.map(|s| s.2),
    })
}
