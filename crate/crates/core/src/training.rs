//! Training multilayer and looped restricted linear-attention models.

use serde::Serialize;

use crate::attention::{RestrictedLayer, RestrictedWeights, Activation};
use crate::error::{IclError, Result};
use crate::instances::{sample_instance, CovarianceDistribution};
use crate::linalg::{clamp_spectrum, Mat, Vector};
use crate::losses::{loss_monte_carlo_with, loss_trace, ExactLoss, LossReport, MonteCarloOptions};
use crate::par::{map_indexed, Execution};
use crate::rng::{self, child_seed, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Optimizer {
    PlainGd { lr: f64 },
    Momentum { lr: f64, beta: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn momentum(lr: f64) -> Self {
        Optimizer::Momentum { lr, beta: 0.9 }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::PlainGd { lr } | Optimizer::Momentum { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam(1e-2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BatchMode {
    /// Exact trace-formula loss; continuous scalar laws are rendered by quadrature.
    Exact,
    /// Fresh Monte-Carlo batch of this many instances per step.
    MonteCarlo(usize),
}

/// Multiplicative loss increase that triggers a learning-rate halving.
pub const BACKOFF_TOLERANCE: f64 = 0.01;
/// Halvings allowed within one step before the step is taken regardless.
pub const MAX_HALVINGS: usize = 20;
/// After an accepted step the learning rate regrows by this factor, up to its configured value.
pub const LR_RECOVERY: f64 = 1.05;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub d: usize,
    pub n: usize,
    pub depth: usize,
    pub looped: bool,
    pub dist: CovarianceDistribution,
    pub optimizer: Optimizer,
    pub steps: usize,
    pub batch: BatchMode,
    pub seed: u64,
    /// Diagonal of the initial `A`; `None` means `0.1 / beta`.
    pub init_scale: Option<f64>,
    /// Standard deviation of the Gaussian perturbation, relative to `init_scale`.
    pub init_noise: f64,
    /// Clamp the spectrum of every `A` into `[lo, hi]` after each step.
    pub projection: Option<(f64, f64)>,
    /// Store a weight snapshot every this many steps.
    pub checkpoint_every: Option<usize>,
    pub exec: Execution,
}

impl TrainConfig {
    pub fn new(dist: CovarianceDistribution, n: usize, depth: usize, looped: bool) -> Self {
        Self {
            d: dist.dim(),
            n,
            depth,
            looped,
            dist,
            optimizer: Optimizer::default(),
            steps: 2000,
            batch: BatchMode::Exact,
            seed: 0,
            init_scale: None,
            init_noise: 0.1,
            projection: None,
            checkpoint_every: None,
            exec: Execution::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IclError::InvalidArgument(m.to_string()));
        if self.d != self.dist.dim() {
            return bad("d differs from the distribution's dimension");
        }
        if self.depth == 0 || self.steps == 0 {
            return bad("depth and steps must be at least 1");
        }
        if self.n < self.d {
            return bad("need n >= d");
        }
        if !(self.optimizer.lr() > 0.0) {
            return bad("learning rate must be positive");
        }
        if let BatchMode::MonteCarlo(0) = self.batch {
            return bad("Monte-Carlo batch must be positive");
        }
        if let Some((lo, hi)) = self.projection {
            if !(lo <= hi) {
                return bad("projection needs lo <= hi");
            }
        }
        Ok(())
    }

    /// The initial weights: `init_scale * I` plus a small seeded Gaussian.
    pub fn initial_weights(&self) -> Result<RestrictedWeights> {
        let scale = self.init_scale.unwrap_or(0.1 / self.dist.eigen_range().1);
        let mut r = rng::stream(self.seed, streams::INIT);
        let d = self.d;
        let mut draw = || Mat::identity(d, d) * scale + rng::normal_matrix(&mut r, d, d) * (scale * self.init_noise);
        let layer = |a: Mat| RestrictedLayer { a, u: Vector::zeros(d) };
        if self.looped {
            RestrictedWeights::looped(layer(draw()), Activation::Linear)
        } else {
            RestrictedWeights::multilayer((0..self.depth).map(|_| layer(draw())).collect(), Activation::Linear)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    #[serde(skip)]
    pub weights_checkpoint: Option<RestrictedWeights>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: RestrictedWeights,
    pub history: Vec<TrainRecord>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.loss)
    }
}

#[derive(Debug, Clone)]
struct OptState {
    t: usize,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl OptState {
    fn new(shapes: usize, d: usize) -> Self {
        Self {
            t: 0,
            m: vec![Mat::zeros(d, d); shapes],
            v: vec![Mat::zeros(d, d); shapes],
        }
    }

    /// Parameter update for gradient `g` at learning rate `lr`.
    fn step(&mut self, opt: &Optimizer, lr: f64, grads: &[Mat]) -> Vec<Mat> {
        self.t += 1;
        match *opt {
            Optimizer::PlainGd { .. } => grads.iter().map(|g| g * -lr).collect(),
            Optimizer::Momentum { beta, .. } => grads
                .iter()
                .zip(self.m.iter_mut())
                .map(|(g, m)| {
                    *m = &*m * beta + g;
                    &*m * -lr
                })
                .collect(),
            Optimizer::Adam { beta1, beta2, eps, .. } => {
                let t = self.t as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                grads
                    .iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(g, (m, v))| {
                        *m = &*m * beta1 + g * (1.0 - beta1);
                        *v = &*v * beta2 + g.component_mul(g) * (1.0 - beta2);
                        Mat::from_fn(g.nrows(), g.ncols(), |i, j| {
                            -lr * (m[(i, j)] / c1) / ((v[(i, j)] / c2).sqrt() + eps)
                        })
                    })
                    .collect()
            }
        }
    }
}

fn apply_update(w: &RestrictedWeights, delta: &[Mat], projection: Option<(f64, f64)>) -> RestrictedWeights {
    let mut next = w.clone();
    for (layer, dl) in next.layers_mut().iter_mut().zip(delta) {
        layer.a += dl;
        if let Some((lo, hi)) = projection {
            layer.a = clamp_spectrum(&layer.a, lo, hi);
        }
    }
    next
}

fn grad_norm(grads: &[Mat]) -> f64 {
    grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
}

/// Squared residual of one sampled instance and its gradient.
fn sample_gradient(
    w: &RestrictedWeights,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, Vec<Mat>)> {
    let inst = sample_instance(&cfg.dist, cfg.n, seed)?;
    let sigma = inst.sigma();
    let d = cfg.d;
    let depth = cfg.depth;
    let a = w.a_sequence(depth);
    let b: Vec<Mat> = a.iter().map(|a_t| Mat::identity(d, d) - &sigma * *a_t).collect();
    // left[t] = F_t^T w*, right[t] = K_t x_q
    let mut left = Vec::with_capacity(depth + 1);
    left.push(inst.w_star().clone());
    for b_t in &b {
        let next = b_t.transpose() * left.last().unwrap();
        left.push(next);
    }
    let mut right = vec![inst.x_q().clone(); depth + 1];
    for t in (0..depth).rev() {
        right[t] = &b[t] * &right[t + 1];
    }
    // prediction - target = -w*^T G x_q
    let r = -left[depth].dot(inst.x_q());
    let mut grads = vec![Mat::zeros(d, d); w.layers().len()];
    for t in 0..depth {
        let outer = &left[t] * right[t + 1].transpose();
        grads[if w.is_shared() { 0 } else { t }] += &sigma * outer * (2.0 * r);
    }
    Ok((r * r, grads))
}

fn batch_gradient(w: &RestrictedWeights, cfg: &TrainConfig, batch: usize, step: usize) -> Result<(f64, Vec<Mat>)> {
    let step_seed = child_seed(cfg.seed, step as u64);
    let parts = map_indexed(cfg.exec, batch, |i| sample_gradient(w, cfg, child_seed(step_seed, i as u64)));
    let mut loss = 0.0;
    let mut grads = vec![Mat::zeros(cfg.d, cfg.d); w.layers().len()];
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (acc, g) in grads.iter_mut().zip(g) {
            *acc += g;
        }
    }
    let k = batch as f64;
    Ok((loss / k, grads.into_iter().map(|g| g / k).collect()))
}

/// Minimizes the population loss from [`TrainConfig::initial_weights`].
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let w = cfg.initial_weights()?;
    train_from(cfg, w)
}

/// Minimizes the population loss starting from the given weights.
pub fn train_from(cfg: &TrainConfig, mut w: RestrictedWeights) -> Result<TrainOutcome> {
    cfg.validate()?;
    w.check_depth(cfg.depth)?;
    let exact = match cfg.batch {
        BatchMode::Exact => Some(ExactLoss::new(&cfg.dist, cfg.depth)?.with_execution(cfg.exec)),
        BatchMode::MonteCarlo(_) => None,
    };
    let eval = |w: &RestrictedWeights, step: usize| -> Result<(f64, Vec<Mat>)> {
        match (&exact, cfg.batch) {
            (Some(e), _) => e.value_and_gradient(w),
            (None, BatchMode::MonteCarlo(b)) => batch_gradient(w, cfg, b, step),
            (None, BatchMode::Exact) => unreachable!(),
        }
    };
    let mut state = OptState::new(w.layers().len(), cfg.d);
    let base_lr = cfg.optimizer.lr();
    let mut lr = base_lr;
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let (mut loss, mut grads) = eval(&w, 0)?;
    for step in 0..=cfg.steps {
        if !loss.is_finite() {
            return Err(IclError::Diverged {
                step,
                history: Box::new(history),
            });
        }
        let checkpoint = cfg
            .checkpoint_every
            .filter(|&k| k > 0 && step % k == 0)
            .map(|_| w.clone());
        history.push(TrainRecord {
            step,
            loss,
            grad_norm: grad_norm(&grads),
            lr,
            weights_checkpoint: checkpoint,
        });
        if step == cfg.steps {
            break;
        }
        let mut halvings = 0;
        loop {
            let mut trial_state = state.clone();
            let delta = trial_state.step(&cfg.optimizer, lr, &grads);
            let cand = apply_update(&w, &delta, cfg.projection);
            let (cand_loss, cand_grads) = eval(&cand, step + 1)?;
            let rejected = exact.is_some()
                && halvings < MAX_HALVINGS
                && !(cand_loss <= loss * (1.0 + BACKOFF_TOLERANCE));
            if rejected {
                lr /= 2.0;
                halvings += 1;
                continue;
            }
            w = cand;
            state = trial_state;
            loss = cand_loss;
            grads = cand_grads;
            if exact.is_some() {
                lr = (lr * LR_RECOVERY).min(base_lr);
            }
            break;
        }
    }
    Ok(TrainOutcome { weights: w, history })
}

/// Held-out loss: exact for linear `u = 0` weights, Monte-Carlo otherwise.
pub fn evaluate(
    weights: &RestrictedWeights,
    depth: usize,
    dist: &CovarianceDistribution,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<LossReport> {
    if weights.activation() == Activation::Linear && weights.has_zero_u() {
        loss_trace(dist, weights, depth)
    } else {
        loss_monte_carlo_with(dist, weights, depth, n, MonteCarloOptions::new(samples, seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_looped_gd_converges_to_identity() {
        let dist = CovarianceDistribution::fixed(Mat::identity(3, 3)).unwrap();
        let mut cfg = TrainConfig::new(dist, 3, 1, true);
        cfg.optimizer = Optimizer::PlainGd { lr: 0.1 };
        cfg.steps = 500;
        let out = train(&cfg).unwrap();
        assert!(out.final_loss() < 1e-6);
        assert_relative_eq!(out.weights.layers()[0].a, Mat::identity(3, 3), epsilon = 1e-3);
    }

    #[test]
    fn diagonal_multilayer_reaches_zero() {
        let sigma = Mat::from_diagonal(&Vector::from_vec(vec![1.0, 2.0, 3.0]));
        let dist = CovarianceDistribution::fixed(sigma).unwrap();
        let mut cfg = TrainConfig::new(dist, 3, 2, false);
        cfg.steps = 1500;
        let out = train(&cfg).unwrap();
        assert!(out.final_loss() <= 1e-6, "loss {}", out.final_loss());
        assert!(out.final_loss() <= out.history[0].loss);
    }

    #[test]
    fn monte_carlo_gradient_matches_exact_in_mean() {
        let dist = CovarianceDistribution::fixed(crate::rng::spd_with_spectrum(&mut crate::rng::stream(1, 0), 2, 1.0, 2.0)).unwrap();
        let mut cfg = TrainConfig::new(dist.clone(), 4, 2, false);
        cfg.init_scale = Some(0.3);
        let w = cfg.initial_weights().unwrap();
        let (_, exact) = ExactLoss::new(&dist, 2).unwrap().value_and_gradient(&w).unwrap();
        let (_, mc) = batch_gradient(&w, &cfg, 40_000, 0).unwrap();
        for (e, m) in exact.iter().zip(&mc) {
            assert!((e - m).abs().max() < 0.05 * e.abs().max().max(0.1));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let dist = CovarianceDistribution::scalar_uniform(2, 1.0, 4.0).unwrap();
        let mut cfg = TrainConfig::new(dist, 2, 3, false);
        cfg.steps = 50;
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        let la: Vec<u64> = a.history.iter().map(|r| r.loss.to_bits()).collect();
        let lb: Vec<u64> = b.history.iter().map(|r| r.loss.to_bits()).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn projection_keeps_spectrum() {
        let dist = CovarianceDistribution::scaled_identities(2, &[1.0, 4.0]).unwrap();
        let mut cfg = TrainConfig::new(dist, 2, 4, true);
        cfg.steps = 100;
        cfg.projection = Some((0.25, 1.0));
        let out = train(&cfg).unwrap();
        for l in crate::linalg::sym_eigenvalues(&out.weights.layers()[0].a) {
            assert!((0.25 - 1e-12..=1.0 + 1e-12).contains(&l));
        }
    }
}
