//! Out-of-distribution behavior of trained minimizers: the multilayer blowup
//! construction and the looped robustness experiment.

use serde::Serialize;

use crate::attention::RestrictedWeights;
use crate::constructions::SpectrumRange;
use crate::error::{IclError, Result};
use crate::instances::CovarianceDistribution;
use crate::linalg::{clamp_spectrum, Mat, Vector};
use crate::losses::{loss_trace, ExactLoss};
use crate::par::Execution;
use crate::training::{train_from, BatchMode, Optimizer, TrainConfig};

/// The shifted covariance sits at `SHIFT_FACTOR * alpha * I`.
pub const SHIFT_FACTOR: f64 = 8.0;

/// The blowup training law: `L` equally weighted diagonal point masses, the
/// first `L - 1` with distinct entries in `(alpha, 2 alpha)` and the last at
/// `beta I`. Returns the law and its zero-loss minimizer `A_t = Sigma_t^{-1}`.
pub fn blowup_train_distribution(alpha: f64, beta: f64, depth: usize, d: usize) -> Result<(CovarianceDistribution, Vec<Mat>)> {
    if depth == 0 || d == 0 {
        return Err(IclError::InvalidArgument("need L >= 1 and d >= 1".into()));
    }
    let w = 1.0 / depth as f64;
    let mut comps = Vec::with_capacity(depth);
    let mut mins = Vec::with_capacity(depth);
    for t in 0..depth {
        let diag = if t + 1 == depth {
            Vector::from_element(d, beta)
        } else {
            // distinct within each layer, strictly inside (alpha, 2 alpha)
            Vector::from_fn(d, |j, _| alpha * (1.0 + (j + 1) as f64 / (d + 1) as f64))
        };
        mins.push(Mat::from_diagonal(&diag.map(|x| 1.0 / x)));
        comps.push((Mat::from_diagonal(&diag), w));
    }
    Ok((CovarianceDistribution::point_masses(comps)?, mins))
}

#[derive(Debug, Clone, Serialize)]
pub struct BlowupReport {
    pub alpha: f64,
    pub beta: f64,
    pub depth: usize,
    pub d: usize,
    pub delta_prime: f64,
    pub eps_mass: f64,
    pub train_loss: f64,
    pub ood_loss: f64,
    /// `eps_mass * delta' * d * 9^(L-1)`.
    pub bound: f64,
    /// `eps_mass * delta'^2 * d * 9^(L-1)`, what the last factor alone guarantees.
    pub proof_bound: f64,
    pub passes: bool,
}

pub fn multilayer_blowup_experiment(
    alpha: f64,
    beta: f64,
    depth: usize,
    d: usize,
    delta_prime: f64,
    eps_mass: f64,
) -> Result<BlowupReport> {
    if !(alpha > 0.0) || !(beta / alpha >= 10.0) {
        return Err(IclError::Regime(format!("need beta / alpha >= 10, got {}", beta / alpha)));
    }
    if !(delta_prime > 0.0 && delta_prime < 1.0) || !(eps_mass > 0.0 && eps_mass <= 1.0) {
        return Err(IclError::Regime("need delta' in (0, 1) and eps in (0, 1]".into()));
    }
    if SHIFT_FACTOR * alpha > (1.0 - delta_prime) * beta {
        return Err(IclError::Regime(format!(
            "shifted support [{}, {}] is empty",
            SHIFT_FACTOR * alpha,
            (1.0 - delta_prime) * beta
        )));
    }
    let (train, mins) = blowup_train_distribution(alpha, beta, depth, d)?;
    let w = RestrictedWeights::from_matrices(mins)?;
    let train_loss = loss_trace(&train, &w, depth)?.value;

    let shifted = Mat::identity(d, d) * (SHIFT_FACTOR * alpha);
    let mut comps = vec![(shifted, eps_mass)];
    if eps_mass < 1.0 {
        let rest = (1.0 - eps_mass) / depth as f64;
        if let crate::instances::CovarianceKind::PointMassMixture(train_comps) = train.kind() {
            comps.extend(train_comps.iter().map(|(s, _)| (s.clone(), rest)));
        }
    }
    let ood = CovarianceDistribution::point_masses(comps)?;
    let ood_loss = loss_trace(&ood, &w, depth)?.value;
    let growth = 9f64.powi(depth as i32 - 1);
    let bound = eps_mass * delta_prime * d as f64 * growth;
    Ok(BlowupReport {
        alpha,
        beta,
        depth,
        d,
        delta_prime,
        eps_mass,
        train_loss,
        ood_loss,
        bound,
        proof_bound: eps_mass * delta_prime * delta_prime * d as f64 * growth,
        passes: train_loss <= 1e-9 && ood_loss >= bound,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RobustnessOptions {
    pub steps: usize,
    /// Adam learning rate in units of `1 / beta`.
    pub relative_lr: f64,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for RobustnessOptions {
    fn default() -> Self {
        Self {
            steps: 3000,
            relative_lr: 0.05,
            seed: 0,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub a_star: Mat,
    pub train_loss: f64,
    pub test_loss: f64,
    pub delta_prime: f64,
    /// Whether `eps' <= eps`, the spread-out mass.
    pub eps_within_spread: bool,
    /// `max(eps', d (1 - alpha/beta)^L)`.
    pub bound: f64,
    /// `min(eps', (1 - alpha/beta)^(2L))`, reported for comparison only.
    pub strong_bound: f64,
    pub holds: bool,
    pub holds_strong: bool,
    /// Norm of the projected gradient at the returned minimizer.
    pub projected_grad_norm: f64,
    pub warning: Option<String>,
}

/// Trains the looped minimizer over `alpha I <= A^{-1} <= beta I` and scores it
/// on a test law supported on `[alpha, (1 - delta') beta]`.
#[allow(clippy::too_many_arguments)]
pub fn looped_robustness_experiment(
    train_dist: &CovarianceDistribution,
    range: SpectrumRange,
    spread: (f64, f64),
    depth: usize,
    test_dist: &CovarianceDistribution,
    eps_prime: f64,
    opts: RobustnessOptions,
) -> Result<RobustnessReport> {
    let (alpha, beta) = (range.alpha(), range.beta());
    let (eps, delta) = spread;
    let d = train_dist.dim();
    if depth == 0 || test_dist.dim() != d {
        return Err(IclError::InvalidArgument("need L >= 1 and matching dimensions".into()));
    }
    if !(eps_prime > 0.0) {
        return Err(IclError::Regime(format!("need eps' > 0, got {eps_prime}")));
    }
    let delta_prime = delta + (d as f64 / eps_prime).ln() / depth as f64;
    if delta_prime > 1.0 - alpha / beta {
        return Err(IclError::Regime(format!(
            "delta' = {delta_prime} exceeds 1 - alpha/beta = {}",
            1.0 - alpha / beta
        )));
    }
    let (tlo, thi) = test_dist.eigen_range();
    let slack = 1e-9 * beta;
    if tlo < alpha - slack || thi > (1.0 - delta_prime) * beta + slack {
        return Err(IclError::Regime(format!(
            "test support [{tlo}, {thi}] not inside [{alpha}, {}]",
            (1.0 - delta_prime) * beta
        )));
    }

    let (lo, hi) = (1.0 / beta, 1.0 / alpha);
    let mut cfg = TrainConfig::new(train_dist.clone(), d, depth, true);
    cfg.optimizer = Optimizer::adam(opts.relative_lr / beta);
    cfg.steps = opts.steps;
    cfg.batch = BatchMode::Exact;
    cfg.seed = opts.seed;
    cfg.projection = Some((lo, hi));
    cfg.exec = opts.exec;
    // start from the feasible point the argument compares against
    let start = RestrictedWeights::looped_matrix(Mat::identity(d, d) * lo)?;
    let out = train_from(&cfg, start)?;
    let a_star = out.weights.layers()[0].a.clone();

    let exact = ExactLoss::new(train_dist, depth)?.with_execution(opts.exec);
    let (train_loss, grads) = exact.value_and_gradient(&out.weights)?;
    let g = &grads[0];
    let step = 1e-3 * lo / g.amax().max(1e-300);
    let projected = (&a_star - clamp_spectrum(&(&a_star - g * step), lo, hi)) / step;
    let projected_grad_norm = projected.norm();
    let warning = (projected_grad_norm > 1e-6).then(|| {
        format!("training stopped with projected gradient norm {projected_grad_norm:e}")
    });

    let test_loss = loss_trace(test_dist, &out.weights, depth)?.value;
    let contraction = 1.0 - alpha / beta;
    let bound = eps_prime.max(d as f64 * contraction.powi(depth as i32));
    let strong_bound = eps_prime.min(contraction.powi(2 * depth as i32));
    Ok(RobustnessReport {
        a_star,
        train_loss,
        test_loss,
        delta_prime,
        eps_within_spread: eps_prime <= eps,
        bound,
        strong_bound,
        holds: test_loss <= bound,
        holds_strong: test_loss <= strong_bound,
        projected_grad_norm,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn blowup_minimizer_has_zero_train_loss() {
        let r = multilayer_blowup_experiment(1.0, 64.0, 3, 4, 0.5, 1.0).unwrap();
        assert!(r.train_loss <= 1e-20);
        assert!(r.ood_loss >= 162.0, "{}", r.ood_loss);
        assert!(r.passes);
    }

    #[test]
    fn single_layer_bound_has_no_growth() {
        let r = multilayer_blowup_experiment(1.0, 64.0, 1, 3, 0.5, 0.5).unwrap();
        assert_relative_eq!(r.bound, 0.5 * 0.5 * 3.0);
        assert!(r.passes);
    }

    #[test]
    fn blowup_regime_checks() {
        assert!(multilayer_blowup_experiment(1.0, 5.0, 2, 2, 0.5, 1.0).is_err());
        assert!(multilayer_blowup_experiment(1.0, 12.0, 2, 2, 0.5, 1.0).is_err());
    }

    #[test]
    fn fixed_beta_train_gives_exact_minimizer() {
        let (alpha, beta, d, l) = (1.0, 10.0, 2, 20);
        let train = CovarianceDistribution::fixed(Mat::identity(d, d) * beta).unwrap();
        let dp = (d as f64 / 0.5f64).ln() / l as f64;
        let test = CovarianceDistribution::fixed(Mat::identity(d, d) * ((1.0 - dp) * beta)).unwrap();
        let range = SpectrumRange::new(alpha, beta).unwrap();
        let r = looped_robustness_experiment(&train, range, (1.0, 0.0), l, &test, 0.5, RobustnessOptions::default()).unwrap();
        assert_relative_eq!(r.a_star, Mat::identity(d, d) / beta, epsilon = 1e-6);
        assert_relative_eq!(r.test_loss, d as f64 * dp.powi(2 * l as i32), max_relative = 1e-3);
        assert!(r.holds);
    }

    #[test]
    fn vacuous_eps_always_passes() {
        let (alpha, beta, d, l) = (1.0, 16.0, 2, 40);
        let (train, _) = blowup_train_distribution(alpha, beta, 3, d).unwrap();
        let test = CovarianceDistribution::scalar_uniform(d, alpha, beta).unwrap();
        let range = SpectrumRange::new(alpha, beta).unwrap();
        let opts = RobustnessOptions { steps: 400, ..Default::default() };
        let r = looped_robustness_experiment(&train, range, (1.0 / 3.0, 0.0), l, &test, d as f64, opts).unwrap();
        assert_eq!(r.delta_prime, 0.0);
        assert_eq!(r.bound, d as f64);
        assert!(r.holds && !r.eps_within_spread, "{r:?}");
    }
}
