//! Population loss of the linear restricted model: the exact trace formula,
//! a Monte-Carlo estimator over sampled instances, and analytic gradients.
//!
//! For a covariance with square root `S`, layer `t` acts as
//! `B_t = I - S A_t S` and the loss is `E_Sigma ||B_0 B_1 ... B_{L-1}||_F^2`.

use serde::Serialize;

use crate::attention::{predict_restricted, Activation, RestrictedWeights};
use crate::error::{IclError, Result};
use crate::instances::{sample_instance, CovarianceDistribution};
use crate::linalg::{Covariance, Mat};
use crate::par::{map_indexed, Execution};
use crate::rng::child_seed;

/// Quadrature nodes used to render continuous scalar laws exactly.
pub const MIN_QUADRATURE_NODES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LossMethod {
    TraceFormula,
    MonteCarlo {
        samples: usize,
        std_error: f64,
        /// Samples dropped because the forward pass overflowed.
        excluded: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub value: f64,
    pub method: LossMethod,
    /// Loss truncated at depth `t = 0..=L` (trace formula only).
    pub per_layer_values: Option<Vec<f64>>,
}

fn require_linear_zero_u(w: &RestrictedWeights) -> Result<()> {
    if w.activation() != Activation::Linear {
        return Err(IclError::ClosedFormUnavailable("ReLU activation"));
    }
    if !w.has_zero_u() {
        return Err(IclError::ClosedFormUnavailable("nonzero u"));
    }
    Ok(())
}

/// `I - S A S` for one component.
fn layer_factor(cov: &Covariance, a: &Mat) -> Mat {
    let d = cov.dim();
    match cov.as_scalar() {
        Some(s) => Mat::identity(d, d) - a * s,
        None => Mat::identity(d, d) - cov.sqrt() * a * cov.sqrt(),
    }
}

/// A distribution rendered as weighted point masses, ready for repeated
/// loss / gradient evaluations at a fixed depth.
#[derive(Debug, Clone)]
pub struct ExactLoss {
    components: Vec<(Covariance, f64)>,
    depth: usize,
    d: usize,
    exec: Execution,
}

impl ExactLoss {
    pub fn new(dist: &CovarianceDistribution, depth: usize) -> Result<Self> {
        let nodes = MIN_QUADRATURE_NODES.max(depth + 1);
        Ok(Self {
            components: dist.exact_components(nodes)?,
            depth,
            d: dist.dim(),
            exec: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn components(&self) -> &[(Covariance, f64)] {
        &self.components
    }

    fn check(&self, w: &RestrictedWeights) -> Result<()> {
        require_linear_zero_u(w)?;
        w.check_depth(self.depth)?;
        if w.d() != self.d {
            return Err(IclError::DimensionMismatch(format!(
                "distribution has d = {} but weights have d = {}",
                self.d,
                w.d()
            )));
        }
        Ok(())
    }

    /// Loss at every truncation depth `0..=L`.
    pub fn per_depth(&self, w: &RestrictedWeights) -> Result<Vec<f64>> {
        self.check(w)?;
        let a = w.a_sequence(self.depth);
        let per: Vec<Vec<f64>> = map_indexed(self.exec, self.components.len(), |i| {
            let (cov, weight) = &self.components[i];
            let mut h = Mat::identity(self.d, self.d);
            let mut out = Vec::with_capacity(self.depth + 1);
            out.push(weight * h.norm_squared());
            for a_t in &a {
                h *= layer_factor(cov, a_t);
                out.push(weight * h.norm_squared());
            }
            out
        });
        let mut total = vec![0.0; self.depth + 1];
        for row in per {
            for (t, v) in row.into_iter().enumerate() {
                total[t] += v;
            }
        }
        Ok(total)
    }

    pub fn value(&self, w: &RestrictedWeights) -> Result<f64> {
        self.check(w)?;
        let a = w.a_sequence(self.depth);
        let vals = map_indexed(self.exec, self.components.len(), |i| {
            let (cov, weight) = &self.components[i];
            let mut h = Mat::identity(self.d, self.d);
            for a_t in &a {
                h *= layer_factor(cov, a_t);
            }
            weight * h.norm_squared()
        });
        Ok(vals.into_iter().sum())
    }

    /// Loss and its gradient with respect to each stored `A` (summed over
    /// steps for looped weights).
    pub fn value_and_gradient(&self, w: &RestrictedWeights) -> Result<(f64, Vec<Mat>)> {
        self.check(w)?;
        let depth = self.depth;
        let d = self.d;
        let a = w.a_sequence(depth);
        let per: Vec<(f64, Vec<Mat>)> = map_indexed(self.exec, self.components.len(), |i| {
            let (cov, weight) = &self.components[i];
            let b: Vec<Mat> = a.iter().map(|a_t| layer_factor(cov, a_t)).collect();
            // prefix[t] = B_0..B_{t-1}, suffix[t] = B_t..B_{L-1}
            let mut prefix = Vec::with_capacity(depth + 1);
            prefix.push(Mat::identity(d, d));
            for b_t in &b {
                let next = prefix.last().unwrap() * b_t;
                prefix.push(next);
            }
            let mut suffix = vec![Mat::identity(d, d); depth + 1];
            for t in (0..depth).rev() {
                suffix[t] = &b[t] * &suffix[t + 1];
            }
            let h = &prefix[depth];
            let grads = (0..depth)
                .map(|t| {
                    let core = prefix[t].transpose() * h * suffix[t + 1].transpose();
                    let g = match cov.as_scalar() {
                        Some(s) => core * s,
                        None => cov.sqrt() * core * cov.sqrt(),
                    };
                    g * (-2.0 * weight)
                })
                .collect();
            (weight * h.norm_squared(), grads)
        });
        let mut value = 0.0;
        let stored = w.layers().len();
        let mut grads = vec![Mat::zeros(d, d); stored];
        for (v, g) in per {
            value += v;
            for (t, g_t) in g.into_iter().enumerate() {
                grads[if w.is_shared() { 0 } else { t }] += g_t;
            }
        }
        Ok((value, grads))
    }
}

/// Exact population loss of linear `u = 0` weights.
pub fn loss_trace(dist: &CovarianceDistribution, w: &RestrictedWeights, depth: usize) -> Result<LossReport> {
    let per = ExactLoss::new(dist, depth)?.per_depth(w)?;
    Ok(LossReport {
        value: per[depth],
        method: LossMethod::TraceFormula,
        per_layer_values: Some(per),
    })
}

/// Gradient of [`loss_trace`] with respect to every stored `A`.
pub fn loss_gradient(dist: &CovarianceDistribution, w: &RestrictedWeights, depth: usize) -> Result<Vec<Mat>> {
    ExactLoss::new(dist, depth)?.value_and_gradient(w).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy)]
pub struct MonteCarloOptions {
    pub samples: usize,
    pub seed: u64,
    /// Propagate overflow instead of excluding the sample.
    pub strict: bool,
    pub exec: Execution,
}

impl MonteCarloOptions {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            strict: false,
            exec: Execution::default(),
        }
    }
}

/// Mean squared query residual over sampled instances; works for any weights.
pub fn loss_monte_carlo(
    dist: &CovarianceDistribution,
    w: &RestrictedWeights,
    depth: usize,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<LossReport> {
    loss_monte_carlo_with(dist, w, depth, n, MonteCarloOptions::new(samples, seed))
}

pub fn loss_monte_carlo_with(
    dist: &CovarianceDistribution,
    w: &RestrictedWeights,
    depth: usize,
    n: usize,
    opts: MonteCarloOptions,
) -> Result<LossReport> {
    if opts.samples == 0 {
        return Err(IclError::InvalidArgument("need at least one sample".into()));
    }
    w.check_depth(depth)?;
    let sq = map_indexed(opts.exec, opts.samples, |i| -> Result<Option<f64>> {
        let inst = sample_instance(dist, n, child_seed(opts.seed, i as u64))?;
        match predict_restricted(&inst, w, depth) {
            Ok(p) => Ok(Some((p - inst.target()).powi(2))),
            Err(IclError::NonFinite { .. }) if !opts.strict => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut kept = Vec::with_capacity(opts.samples);
    for v in sq {
        if let Some(v) = v? {
            kept.push(v);
        }
    }
    let excluded = opts.samples - kept.len();
    let m = kept.len();
    if m == 0 {
        return Err(IclError::NonFinite { layer: depth });
    }
    let mean = kept.iter().sum::<f64>() / m as f64;
    let var = if m > 1 {
        kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    Ok(LossReport {
        value: mean,
        method: LossMethod::MonteCarlo {
            samples: m,
            std_error: (var / m as f64).sqrt(),
            excluded,
        },
        per_layer_values: None,
    })
}
