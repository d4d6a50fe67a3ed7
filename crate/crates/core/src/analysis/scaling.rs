//! The scaling adversary: rescale `(X, y)` by `gamma` and look for a constant
//! relative error of a fixed-depth model.

use serde::Serialize;

use super::Model;
use crate::error::{IclError, Result};
use crate::instances::{sample_instance, CovarianceDistribution, RegressionInstance};
use crate::par::{map_indexed, Execution};
use crate::rng::child_seed;

/// Relative error that marks a grid point as bad for the robust interval.
pub const BAD_THRESHOLD: f64 = 0.125;
/// Instances with `|w*^T x_q| < tol ||w*|| ||x_q||` are treated as degenerate.
pub const NONDEGENERATE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GridSpacing {
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy)]
pub struct ScalingOptions {
    pub grid_points: usize,
    /// Overrides the default `[1, 36 L^2]` / `[1, 2^L]` range.
    pub range: Option<(f64, f64)>,
    pub spacing: Option<GridSpacing>,
    pub exec: Execution,
}

impl ScalingOptions {
    pub fn new(grid_points: usize) -> Self {
        Self {
            grid_points,
            range: None,
            spacing: None,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingSearchResult {
    pub gamma_star: f64,
    pub relative_error: f64,
    /// Widest contiguous run of grid points with error `>= 1/8`.
    pub bad_interval: Option<(f64, f64)>,
    pub range: (f64, f64),
    pub spacing: GridSpacing,
    pub grid: Vec<(f64, f64)>,
}

impl ScalingSearchResult {
    pub fn bad_width(&self) -> f64 {
        self.bad_interval.map_or(0.0, |(a, b)| b - a)
    }
}

fn check_nondegenerate(inst: &RegressionInstance) -> Result<f64> {
    let target = inst.target();
    let scale = inst.w_star().norm() * inst.x_q().norm();
    if !(target.abs() >= NONDEGENERATE_TOL * scale) || target == 0.0 {
        return Err(IclError::InvalidArgument(format!(
            "w*^T x_q = {target:e} is degenerate; relative error undefined"
        )));
    }
    Ok(target)
}

/// Relative error of the model on `(gamma X, w*, gamma y, x_q)`; overflow gives `+inf`.
pub fn relative_error_at(inst: &RegressionInstance, model: Model<'_>, depth: usize, gamma: f64) -> Result<f64> {
    let target = check_nondegenerate(inst)?;
    rel_err(inst, model, depth, gamma, target)
}

fn rel_err(inst: &RegressionInstance, model: Model<'_>, depth: usize, gamma: f64, target: f64) -> Result<f64> {
    match model.predict(&inst.scaled(gamma), depth) {
        Ok(p) => {
            let e = ((p - target) / target).abs();
            Ok(if e.is_finite() { e } else { f64::INFINITY })
        }
        Err(IclError::NonFinite { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

pub fn scaling_adversary(inst: &RegressionInstance, model: Model<'_>, depth: usize, grid_points: usize) -> Result<ScalingSearchResult> {
    scaling_adversary_with(inst, model, depth, ScalingOptions::new(grid_points))
}

pub fn scaling_adversary_with(
    inst: &RegressionInstance,
    model: Model<'_>,
    depth: usize,
    opts: ScalingOptions,
) -> Result<ScalingSearchResult> {
    let target = check_nondegenerate(inst)?;
    if opts.grid_points < 2 {
        return Err(IclError::InvalidArgument("scaling grid needs at least 2 points".into()));
    }
    let l = depth.max(1) as f64;
    let (lo, hi) = opts.range.unwrap_or(if model.is_restricted() {
        (1.0, 36.0 * l * l)
    } else {
        (1.0, 2f64.powi(depth.max(1) as i32))
    });
    if !(lo > 0.0 && hi > lo) {
        return Err(IclError::InvalidArgument(format!("bad scaling range [{lo}, {hi}]")));
    }
    let spacing = opts.spacing.unwrap_or(if model.is_restricted() {
        GridSpacing::Linear
    } else {
        GridSpacing::Log
    });
    let m = opts.grid_points;
    let gamma = |i: usize| {
        if i == m - 1 {
            return hi;
        }
        let f = i as f64 / (m - 1) as f64;
        match spacing {
            GridSpacing::Linear => lo + (hi - lo) * f,
            GridSpacing::Log => lo * (hi / lo).powf(f),
        }
    };
    let errs = map_indexed(opts.exec, m, |i| rel_err(inst, model, depth, gamma(i), target));
    let mut grid = Vec::with_capacity(m);
    for (i, e) in errs.into_iter().enumerate() {
        grid.push((gamma(i), e?));
    }
    // first index wins ties, i.e. the smallest gamma
    let (mut gamma_star, mut worst) = grid[0];
    for &(g, e) in &grid[1..] {
        if e > worst {
            gamma_star = g;
            worst = e;
        }
    }
    let mut best: Option<(f64, f64)> = None;
    let mut start: Option<f64> = None;
    let mut last = 0.0;
    for &(g, e) in &grid {
        if e >= BAD_THRESHOLD {
            start.get_or_insert(g);
            last = g;
        } else if let Some(s) = start.take() {
            if best.is_none_or(|(a, b)| last - s > b - a) {
                best = Some((s, last));
            }
        }
    }
    if let Some(s) = start {
        if best.is_none_or(|(a, b)| last - s > b - a) {
            best = Some((s, last));
        }
    }
    Ok(ScalingSearchResult {
        gamma_star,
        relative_error: worst,
        bad_interval: best,
        range: (lo, hi),
        spacing,
        grid,
    })
}

/// Draws instances until `|w*^T x_q|` is not degenerate.
pub fn sample_nondegenerate_instance(dist: &CovarianceDistribution, n: usize, seed: u64) -> Result<RegressionInstance> {
    for k in 0..64u64 {
        let inst = sample_instance(dist, n, if k == 0 { seed } else { child_seed(seed, k) })?;
        if check_nondegenerate(&inst).is_ok() {
            return Ok(inst);
        }
    }
    Err(IclError::InvalidArgument("could not draw a non-degenerate instance".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::RestrictedWeights;
    use crate::constructions::{chebyshev_weights, SpectrumRange};
    use crate::linalg::Mat;

    #[test]
    fn zero_weights_error_one_everywhere() {
        let dist = CovarianceDistribution::fixed(Mat::identity(2, 2)).unwrap();
        let inst = sample_nondegenerate_instance(&dist, 3, 1).unwrap();
        let w = RestrictedWeights::from_matrices(vec![Mat::zeros(2, 2); 2]).unwrap();
        let r = scaling_adversary(&inst, Model::Restricted(&w), 2, 64).unwrap();
        assert_eq!(r.gamma_star, 1.0);
        assert!(r.grid.iter().all(|&(_, e)| (e - 1.0).abs() < 1e-15));
        assert_eq!(r.bad_interval, Some((1.0, 144.0)));
    }

    #[test]
    fn chebyshev_is_accurate_at_one_but_not_everywhere() {
        let range = SpectrumRange::new(1.0, 4.0).unwrap();
        let w = chebyshev_weights(range, 4, 2).unwrap();
        let dist = CovarianceDistribution::scalar_uniform(2, 1.0, 4.0).unwrap();
        let inst = sample_nondegenerate_instance(&dist, 2, 3).unwrap();
        let r = scaling_adversary(&inst, Model::Restricted(&w), 4, 512).unwrap();
        // inside the Chebyshev envelope 2 (1/3)^4
        assert!(r.grid[0].1 < 2.0 / 81.0);
        assert!(r.relative_error >= 0.25);
    }

    #[test]
    fn degenerate_target_rejected() {
        let inst = RegressionInstance::new(
            Mat::identity(2, 2),
            crate::linalg::Vector::from_vec(vec![1.0, 0.0]),
            crate::linalg::Vector::from_vec(vec![0.0, 1.0]),
        )
        .unwrap();
        let w = RestrictedWeights::looped_matrix(Mat::zeros(2, 2)).unwrap();
        assert!(scaling_adversary(&inst, Model::Restricted(&w), 1, 8).is_err());
    }
}
