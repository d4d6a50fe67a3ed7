//! Polynomial-degree oracle: `gamma -> y_q^{(L)}(gamma X, gamma y, x_q)` is a
//! polynomial with zero constant term; fit it on positive Chebyshev nodes and
//! check held-out residuals.

use std::f64::consts::PI;

use serde::Serialize;

use super::Model;
use crate::error::{IclError, Result};
use crate::instances::RegressionInstance;
use crate::linalg::{chebyshev_t, Mat, Vector};

/// Positive interval the scale `gamma` is sampled from.
pub const FIT_INTERVAL: (f64, f64) = (0.5, 1.5);
/// Held-out residual allowed, relative to the largest sampled value.
pub const FIT_TOL: f64 = 1e-8;
/// Design matrices worse than this are refused.
const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Serialize)]
pub struct DegreeReport {
    /// Smallest degree whose fit passes; `None` if none up to the claim does.
    pub fitted_degree: Option<usize>,
    pub claimed_degree: usize,
    /// Held-out residual of the fit at the claimed degree.
    pub max_interp_residual: f64,
    pub scale: f64,
    /// Whether the map is a polynomial in `gamma^2` alone.
    pub parity_even: bool,
    pub passes: bool,
}

fn to_unit(x: f64, (lo, hi): (f64, f64)) -> f64 {
    (2.0 * x - (lo + hi)) / (hi - lo)
}

/// Columns `g(x) * T_j(map(g(x)))`, `j < k`.
fn design(xs: &[f64], k: usize, even: bool) -> Mat {
    let (lo, hi) = FIT_INTERVAL;
    let iv = if even { (lo * lo, hi * hi) } else { (lo, hi) };
    Mat::from_fn(xs.len(), k, |i, j| {
        let g = if even { xs[i] * xs[i] } else { xs[i] };
        g * chebyshev_t(j, to_unit(g, iv))
    })
}

/// Held-out max residual of the least-squares fit with `k` basis functions.
fn fit_residual(fit_x: &[f64], fit_y: &Vector, held_x: &[f64], held_y: &Vector, k: usize, even: bool) -> Result<f64> {
    let v = design(fit_x, k, even);
    let svd = v.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(IclError::IllConditioned(format!(
            "basis of size {k} has condition number {:e}",
            smax / smin
        )));
    }
    let coef = svd
        .solve(fit_y, 0.0)
        .map_err(|e| IclError::IllConditioned(e.to_string()))?;
    let pred = design(held_x, k, even) * coef;
    Ok((pred - held_y).amax())
}

pub fn degree_oracle(inst: &RegressionInstance, model: Model<'_>, depth: usize, gamma_samples: usize) -> Result<DegreeReport> {
    let claimed = model.degree_bound(depth);
    if gamma_samples < claimed + 2 {
        return Err(IclError::InvalidArgument(format!(
            "need at least {} gamma samples for degree {claimed}",
            claimed + 2
        )));
    }
    let (lo, hi) = FIT_INTERVAL;
    let m = gamma_samples;
    let map = |x: f64| lo + (hi - lo) * (x + 1.0) / 2.0;
    let fit_x: Vec<f64> = (0..m).map(|i| map(((2 * i + 1) as f64 * PI / (2 * m) as f64).cos())).collect();
    let held_x: Vec<f64> = (1..m).map(|i| map((i as f64 * PI / m as f64).cos())).collect();
    let eval = |xs: &[f64]| -> Result<Vector> {
        let vals: Result<Vec<f64>> = xs.iter().map(|&g| model.raw_query(&inst.scaled(g), depth)).collect();
        Ok(Vector::from_vec(vals?))
    };
    let fit_y = eval(&fit_x)?;
    let held_y = eval(&held_x)?;
    let scale = fit_y.amax().max(held_y.amax());
    let tol = FIT_TOL * scale;

    let mut fitted = None;
    let mut at_claim = 0.0;
    if scale == 0.0 {
        fitted = Some(0);
    } else {
        for k in 1..=claimed {
            let r = fit_residual(&fit_x, &fit_y, &held_x, &held_y, k, false)?;
            if r <= tol && fitted.is_none() {
                fitted = Some(k);
            }
            if k == claimed {
                at_claim = r;
            }
        }
    }
    let parity_even = scale == 0.0
        || (claimed >= 2 && fit_residual(&fit_x, &fit_y, &held_x, &held_y, claimed / 2, true)? <= tol);
    Ok(DegreeReport {
        fitted_degree: fitted,
        claimed_degree: claimed,
        max_interp_residual: at_claim,
        scale,
        parity_even,
        passes: fitted.is_some_and(|k| k <= claimed) && at_claim <= tol,
    })
}
