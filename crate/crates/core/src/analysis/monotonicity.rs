//! Depth monotonicity: unequal multilayer weights admit a rank-one covariance
//! on which the loss is non-monotone in depth; looped weights become monotone
//! after a computable depth.

use serde::Serialize;

use crate::attention::{Activation, RestrictedWeights};
use crate::error::{IclError, Result};
use crate::linalg::{sym_eigenvalues, symmetrize, Covariance, Mat, Vector};
use crate::rng::{self, streams};

/// Extra depths checked past the computed `L_0`.
pub const TAIL_SPAN: usize = 50;
const REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    /// Direction of the rank-one covariance `Sigma = c v v^T`.
    pub direction: Vector,
    pub c: f64,
    /// The two layers whose quadratic forms straddle the flip.
    pub layers: (usize, usize),
    /// `gamma_t = c v^T A_t v`.
    pub gammas: Vec<f64>,
    /// `prod_{t<k} (gamma_t - 1)^2 + (d - 1)` for `k = 0..=L`.
    pub per_depth_product: Vec<f64>,
    /// The same sequence from the matrix trace formula.
    pub per_depth_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailCheck {
    /// `min_j ln(d / (r_j - 1)) / ln r_j` over `r_j = |1 - beta_j| > 1`, or `None`.
    pub l0: Option<f64>,
    pub start: usize,
    pub end: usize,
    /// Loss at depths `start..=end`.
    pub losses: Vec<f64>,
    pub monotone: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    pub is_looped: bool,
    pub witness: Option<Witness>,
    /// Looped weights: one tail check per probed covariance.
    pub tails: Vec<TailCheck>,
}

impl MonotonicityReport {
    pub fn passes(&self) -> bool {
        if self.is_looped {
            self.tails.iter().all(|t| t.monotone)
        } else {
            self.witness.is_some()
        }
    }
}

fn per_depth_trace(a: &[&Mat], s: &Mat) -> Vec<f64> {
    let d = s.nrows();
    let mut h = Mat::identity(d, d);
    let mut out = vec![h.norm_squared()];
    for a_t in a {
        h *= Mat::identity(d, d) - s * *a_t * s;
        out.push(h.norm_squared());
    }
    out
}

fn non_monotone(seq: &[f64]) -> bool {
    let up = seq.windows(2).any(|w| w[1] > w[0] * (1.0 + REL_TOL));
    let down = seq.windows(2).any(|w| w[1] < w[0] * (1.0 - REL_TOL));
    up && down
}

/// Scale `c` making `c q_i` land inside `(0, 2)` and `c q_j` outside `[0, 2]`.
fn straddle(q: &[f64]) -> Option<(f64, (usize, usize))> {
    let n = q.len();
    for i in 0..n {
        for j in 0..n {
            let (qi, qj) = (q[i], q[j]);
            let c = if qi > 0.0 && qj > qi * (1.0 + 1e-6) {
                2.0 / (qi * qj).sqrt()
            } else if qi > 0.0 && qj < 0.0 {
                0.5 / qi
            } else {
                continue;
            };
            // a factor of exactly zero would freeze the product
            if q.iter().all(|&qk| (c * qk - 1.0).abs() > 1e-6) {
                return Some((c, (i, j)));
            }
            let c = c * 0.999;
            if q.iter().all(|&qk| (c * qk - 1.0).abs() > 1e-6) {
                return Some((c, (i, j)));
            }
        }
    }
    None
}

/// Loss `||(I - S A S)^L||_F^2` of the symmetric part of `A` on `Sigma`, checked
/// for monotonicity from `ceil(L_0)` (or 0) for `span` further depths.
pub fn looped_tail_check(a: &Mat, cov: &Covariance, span: usize) -> Result<TailCheck> {
    let d = cov.dim();
    let a = symmetrize(a);
    let b = Mat::identity(d, d) - cov.sqrt() * &a * cov.sqrt();
    let b = symmetrize(&b);
    let radii: Vec<f64> = sym_eigenvalues(&b).into_iter().map(f64::abs).collect();
    let l0 = radii
        .iter()
        .filter(|&&r| r > 1.0 + 1e-12)
        .map(|&r| ((d as f64 / (r - 1.0)).ln() / r.ln()).max(0.0))
        .min_by(f64::total_cmp);
    let start = l0.map_or(0, |l| l.ceil() as usize);
    let end = start + span;
    let mut h = Mat::identity(d, d);
    let mut losses = Vec::with_capacity(span + 1);
    for l in 0..=end {
        if l >= start {
            losses.push(h.norm_squared());
        }
        h = &h * &b;
    }
    let tol = |x: f64| REL_TOL * x.abs() + 1e-300;
    let monotone = if l0.is_some() {
        losses.windows(2).all(|w| w[1] >= w[0] - tol(w[0]))
    } else {
        losses.windows(2).all(|w| w[1] <= w[0] + tol(w[0]))
    };
    Ok(TailCheck {
        l0,
        start,
        end,
        losses,
        monotone,
    })
}

/// For unequal layers, searches `search_directions` random rank-one covariances
/// for a non-monotone depth profile; for equal layers, checks the monotone tail
/// on `search_directions` random covariances.
pub fn monotonicity_probe(w: &RestrictedWeights, search_directions: usize, seed: u64) -> Result<MonotonicityReport> {
    if w.activation() != Activation::Linear || !w.has_zero_u() {
        return Err(IclError::ClosedFormUnavailable("monotonicity needs linear, u = 0 weights"));
    }
    let d = w.d();
    let layers = w.layers();
    let is_looped = w.is_shared() || layers.windows(2).all(|p| p[0].a == p[1].a);
    let mut r = rng::stream(seed, streams::DIRECTIONS);
    if is_looped {
        let a = &layers[0].a;
        let mut tails = Vec::with_capacity(search_directions);
        for _ in 0..search_directions {
            let cov = Covariance::new(rng::spd_with_spectrum(&mut r, d, 0.25, 4.0))?;
            tails.push(looped_tail_check(a, &cov, TAIL_SPAN)?);
        }
        return Ok(MonotonicityReport {
            is_looped,
            witness: None,
            tails,
        });
    }
    let a: Vec<&Mat> = layers.iter().map(|l| &l.a).collect();
    for _ in 0..search_directions {
        let v = rng::unit_vector(&mut r, d);
        let q: Vec<f64> = a.iter().map(|a_t| v.dot(&(*a_t * &v))).collect();
        let Some((c, pair)) = straddle(&q) else {
            continue;
        };
        let gammas: Vec<f64> = q.iter().map(|qk| c * qk).collect();
        let mut prod = 1.0;
        let mut per_depth_product = vec![d as f64];
        for g in &gammas {
            prod *= (g - 1.0).powi(2);
            per_depth_product.push(prod + (d - 1) as f64);
        }
        let s = &v * v.transpose() * c.sqrt();
        let per_depth_trace = per_depth_trace(&a, &s);
        if non_monotone(&per_depth_product) && non_monotone(&per_depth_trace) {
            return Ok(MonotonicityReport {
                is_looped,
                witness: Some(Witness {
                    direction: v,
                    c,
                    layers: pair,
                    gammas,
                    per_depth_product,
                    per_depth_trace,
                }),
                tails: vec![],
            });
        }
    }
    Ok(MonotonicityReport {
        is_looped,
        witness: None,
        tails: vec![],
    })
}
