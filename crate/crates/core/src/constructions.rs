//! Explicit weight constructions: Chebyshev iteration, plain gradient descent
//! and a reference Newton–Schulz inverse solver.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::attention::RestrictedWeights;
use crate::error::{IclError, Result};
use crate::instances::RegressionInstance;
use crate::linalg::{spectral_norm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRange {
    alpha: f64,
    beta: f64,
}

impl SpectrumRange {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta >= alpha) || !beta.is_finite() {
            return Err(IclError::InvalidArgument(format!(
                "spectrum range needs 0 < alpha <= beta, got [{alpha}, {beta}]"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn kappa(&self) -> f64 {
        self.beta / self.alpha
    }

    /// `points` evenly spaced values covering `[alpha, beta]`.
    pub fn grid(&self, points: usize) -> Vec<f64> {
        if points <= 1 || self.alpha == self.beta {
            return vec![self.alpha];
        }
        let h = (self.beta - self.alpha) / (points - 1) as f64;
        (0..points).map(|i| self.alpha + h * i as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootOrder {
    #[default]
    Natural,
    /// Greedy Leja ordering; keeps partial products small at large depth.
    Leja,
}

fn check_depth(depth: usize) -> Result<()> {
    if depth == 0 {
        return Err(IclError::InvalidArgument("depth must be at least 1".into()));
    }
    Ok(())
}

/// The `depth` Chebyshev roots mapped into `(alpha, beta)`, in index order.
pub fn chebyshev_roots(range: SpectrumRange, depth: usize) -> Result<Vec<f64>> {
    check_depth(depth)?;
    let (a, b) = (range.alpha, range.beta);
    Ok((0..depth)
        .map(|i| (b - a) / 2.0 * ((2 * i + 1) as f64 * PI / (2 * depth) as f64).cos() + (b + a) / 2.0)
        .collect())
}

fn leja(mut pool: Vec<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(pool.len());
    // start from the root of largest magnitude
    let first = (0..pool.len())
        .max_by(|&i, &j| pool[i].abs().total_cmp(&pool[j].abs()))
        .unwrap();
    out.push(pool.swap_remove(first));
    while !pool.is_empty() {
        let score = |x: f64| out.iter().map(|&c: &f64| (x - c).abs().ln()).sum::<f64>();
        let next = (0..pool.len())
            .max_by(|&i, &j| score(pool[i]).total_cmp(&score(pool[j])))
            .unwrap();
        out.push(pool.swap_remove(next));
    }
    out
}

pub fn chebyshev_weights(range: SpectrumRange, depth: usize, d: usize) -> Result<RestrictedWeights> {
    chebyshev_weights_ordered(range, depth, d, RootOrder::Natural)
}

/// Multilayer weights `A_i = I / theta_i` over the mapped Chebyshev roots.
pub fn chebyshev_weights_ordered(range: SpectrumRange, depth: usize, d: usize, order: RootOrder) -> Result<RestrictedWeights> {
    let mut roots = chebyshev_roots(range, depth)?;
    if order == RootOrder::Leja {
        roots = leja(roots);
    }
    RestrictedWeights::from_matrices(roots.iter().map(|t| Mat::identity(d, d) / *t).collect())
}

/// Default depth for a target accuracy: `ceil(sqrt(kappa) ln(2/eps) / 2) + 1`.
pub fn chebyshev_depth(range: SpectrumRange, eps: f64) -> usize {
    (range.kappa().sqrt() * (2.0 / eps).ln() / 2.0).ceil().max(0.0) as usize + 1
}

/// Looped weights with the shared step `A = I / (2 beta)`.
pub fn gd_weights(range: SpectrumRange, depth: usize, d: usize) -> Result<RestrictedWeights> {
    check_depth(depth)?;
    RestrictedWeights::looped_matrix(Mat::identity(d, d) / (2.0 * range.beta))
}

/// The GD residual bound factor `(1 - alpha / (2 beta))^L`.
pub fn gd_bound_factor(range: SpectrumRange, depth: usize) -> f64 {
    (1.0 - range.alpha / (2.0 * range.beta)).powi(depth as i32)
}

/// `prod_i (1 - x / theta_i)`.
pub fn residual_polynomial(roots: &[f64], x: f64) -> f64 {
    roots.iter().map(|t| 1.0 - x / t).product()
}

/// Worst `|prod_i (1 - x / theta_i)|` on a uniform grid over the range.
pub fn worst_grid_residual(roots: &[f64], range: SpectrumRange, points: usize) -> f64 {
    range
        .grid(points)
        .into_iter()
        .map(|x| residual_polynomial(roots, x).abs())
        .fold(0.0, f64::max)
}

/// The classical Chebyshev envelope `2 q^L`, `q = (sqrt(kappa) - 1) / (sqrt(kappa) + 1)`.
pub fn chebyshev_envelope(range: SpectrumRange, depth: usize) -> f64 {
    let s = range.kappa().sqrt();
    2.0 * ((s - 1.0) / (s + 1.0)).powi(depth as i32)
}

#[derive(Debug, Clone, Serialize)]
pub struct NewtonReport {
    pub prediction: f64,
    /// `||M_j Sigma - I||_2` for `j = 0..=L`.
    pub residual_per_step: Vec<f64>,
    #[serde(skip)]
    pub inverse: Mat,
}

/// Newton–Schulz with `M_0 = I / beta`.
pub fn newton_schulz_solve(inst: &RegressionInstance, range: SpectrumRange, depth: usize) -> Result<NewtonReport> {
    newton_schulz_with_init(inst, 1.0 / range.beta, depth)
}

/// Newton–Schulz `M_j = 2 M_{j-1} - M_{j-1} Sigma M_{j-1}` from `M_0 = c I`;
/// the prediction is `x_q^T M_L X y`.
pub fn newton_schulz_with_init(inst: &RegressionInstance, c: f64, depth: usize) -> Result<NewtonReport> {
    check_depth(depth)?;
    let sigma = inst.sigma();
    let d = inst.d();
    let eye = Mat::identity(d, d);
    let mut m = &eye * c;
    let r0 = spectral_norm(&(&m * &sigma - &eye));
    if !(r0 < 1.0) {
        return Err(IclError::OutsideContraction(r0));
    }
    let mut residuals = vec![r0];
    for _ in 0..depth {
        m = &m * 2.0 - &m * &sigma * &m;
        residuals.push(spectral_norm(&(&m * &sigma - &eye)));
    }
    let prediction = inst.x_q().dot(&(&m * (inst.x() * inst.y())));
    Ok(NewtonReport {
        prediction,
        residual_per_step: residuals,
        inverse: m,
    })
}
