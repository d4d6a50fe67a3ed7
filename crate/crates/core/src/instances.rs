//! Realizable linear-regression instances, prompt matrices and covariance laws.
//!
//! An instance is `(X, w*, y, x_q)` with `X` of shape `d x n`, labels
//! `y = X^T w*` and covariance `Sigma = X X^T`. Sampling builds
//! `X = Sigma^{1/2} R` with `R` having orthonormal rows, so `X X^T` equals the
//! drawn covariance up to rounding.

use std::borrow::Cow;

use rand::Rng as _;
use serde::Serialize;

use crate::error::{IclError, Result};
use crate::linalg::{gauss_legendre, scalar_multiple_of_identity, sym_eigenvalues, Covariance, Mat, Vector};
use crate::rng::{self, streams};

/// Relative tolerance for `y = X^T w*`.
pub const REALIZABILITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionInstance {
    x: Mat,
    w_star: Vector,
    y: Vector,
    x_q: Vector,
}

impl RegressionInstance {
    /// Builds a realizable instance; labels are computed as `X^T w*`.
    pub fn new(x: Mat, w_star: Vector, x_q: Vector) -> Result<Self> {
        let y = x.transpose() * &w_star;
        Self::from_parts(x, w_star, y, x_q)
    }

    /// Builds an instance from all four parts, checking shapes and realizability.
    pub fn from_parts(x: Mat, w_star: Vector, y: Vector, x_q: Vector) -> Result<Self> {
        let (d, n) = x.shape();
        if d == 0 || n < d {
            return Err(IclError::DimensionMismatch(format!(
                "need d >= 1 and n >= d, got d={d}, n={n}"
            )));
        }
        if w_star.len() != d || x_q.len() != d || y.len() != n {
            return Err(IclError::DimensionMismatch(format!(
                "X is {d}x{n} but |w*|={}, |x_q|={}, |y|={}",
                w_star.len(),
                x_q.len(),
                y.len()
            )));
        }
        let inst = Self { x, w_star, y, x_q };
        let res = inst.realizability_residual();
        if res > REALIZABILITY_TOL {
            return Err(IclError::InvalidArgument(format!(
                "labels are not realizable: relative residual {res:e}"
            )));
        }
        Ok(inst)
    }

    /// Recovers an instance from a prompt, solving `X X^T w = X y` for `w*`.
    pub fn from_prompt(prompt: &PromptMatrix) -> Result<Self> {
        let (x, y, x_q) = prompt.blocks();
        let gram = &x * x.transpose();
        let rhs = &x * &y;
        let w_star = gram
            .cholesky()
            .ok_or(IclError::SingularCovariance {
                min_eig: 0.0,
                max_eig: 0.0,
            })?
            .solve(&rhs);
        Self::from_parts(x, w_star, y, x_q)
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }
    pub fn n(&self) -> usize {
        self.x.ncols()
    }
    pub fn x(&self) -> &Mat {
        &self.x
    }
    pub fn w_star(&self) -> &Vector {
        &self.w_star
    }
    pub fn y(&self) -> &Vector {
        &self.y
    }
    pub fn x_q(&self) -> &Vector {
        &self.x_q
    }

    /// `X X^T`.
    pub fn sigma(&self) -> Mat {
        &self.x * self.x.transpose()
    }

    /// The true query label `w*^T x_q`.
    pub fn target(&self) -> f64 {
        self.w_star.dot(&self.x_q)
    }

    /// `||y - X^T w*|| / ||y||` (absolute when `y = 0`).
    pub fn realizability_residual(&self) -> f64 {
        let r = (&self.y - self.x.transpose() * &self.w_star).norm();
        let scale = self.y.norm();
        if scale > 0.0 {
            r / scale
        } else {
            r
        }
    }

    /// The scaled instance `(gamma X, w*, gamma y, x_q)`.
    pub fn scaled(&self, gamma: f64) -> Self {
        Self {
            x: &self.x * gamma,
            w_star: self.w_star.clone(),
            y: &self.y * gamma,
            x_q: self.x_q.clone(),
        }
    }
}

/// The `(d+1) x (n+1)` attention input `[[X, x_q], [y^T, 0]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMatrix {
    z: Mat,
}

impl PromptMatrix {
    pub fn from_matrix(z: Mat) -> Result<Self> {
        if z.nrows() < 2 || z.ncols() < 2 {
            return Err(IclError::DimensionMismatch(format!(
                "prompt must be at least 2x2, got {}x{}",
                z.nrows(),
                z.ncols()
            )));
        }
        Ok(Self { z })
    }

    pub fn d(&self) -> usize {
        self.z.nrows() - 1
    }
    pub fn n(&self) -> usize {
        self.z.ncols() - 1
    }
    pub fn matrix(&self) -> &Mat {
        &self.z
    }
    pub fn into_matrix(self) -> Mat {
        self.z
    }

    /// Splits the prompt back into `(X, y, x_q)`.
    pub fn blocks(&self) -> (Mat, Vector, Vector) {
        let (d, n) = (self.d(), self.n());
        let x = self.z.view((0, 0), (d, n)).into_owned();
        let y = self.z.row(d).columns(0, n).transpose();
        let x_q = self.z.view((0, n), (d, 1)).column(0).into_owned();
        (x, y, x_q)
    }

    /// Entry `(d, n)`, the running query label.
    pub fn query_entry(&self) -> f64 {
        self.z[(self.d(), self.n())]
    }
}

pub fn assemble_prompt(inst: &RegressionInstance) -> PromptMatrix {
    let (d, n) = (inst.d(), inst.n());
    let mut z = Mat::zeros(d + 1, n + 1);
    z.view_mut((0, 0), (d, n)).copy_from(inst.x());
    z.view_mut((d, 0), (1, n)).copy_from(&inst.y().transpose());
    z.view_mut((0, n), (d, 1)).copy_from(inst.x_q());
    PromptMatrix { z }
}

/// The shape of a covariance law. Scalar families (`ScalarUniform`,
/// `WindowedMixture`) draw `Sigma = s I_d`.
#[derive(Debug, Clone, Serialize)]
pub enum CovarianceKind {
    Fixed(#[serde(skip)] Mat),
    PointMassMixture(#[serde(skip)] Vec<(Mat, f64)>),
    ScalarUniform { lo: f64, hi: f64 },
    WindowedMixture { centers: Vec<f64>, window: f64 },
}

/// A sampleable law over SPD covariances with eigenvalues in `[alpha, beta]`.
#[derive(Debug, Clone)]
pub struct CovarianceDistribution {
    kind: CovarianceKind,
    d: usize,
    alpha: f64,
    beta: f64,
    // factored point masses (Fixed / PointMassMixture), parallel to `weights`
    atoms: Vec<Covariance>,
    weights: Vec<f64>,
}

const WEIGHT_TOL: f64 = 1e-12;
const SPD_TOL: f64 = 1e-9;

impl CovarianceDistribution {
    pub fn fixed(sigma: Mat) -> Result<Self> {
        Self::point_masses(vec![(sigma, 1.0)]).map(|mut dist| {
            if let CovarianceKind::PointMassMixture(mut comps) = dist.kind {
                dist.kind = CovarianceKind::Fixed(comps.remove(0).0);
            }
            dist
        })
    }

    pub fn point_masses(components: Vec<(Mat, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(IclError::InvalidDistribution("empty mixture".into()));
        }
        let d = components[0].0.nrows();
        let mut total = 0.0;
        let mut atoms = Vec::with_capacity(components.len());
        let mut weights = Vec::with_capacity(components.len());
        let (mut alpha, mut beta) = (f64::INFINITY, f64::NEG_INFINITY);
        for (sigma, w) in &components {
            if sigma.nrows() != d || sigma.ncols() != d {
                return Err(IclError::DimensionMismatch(format!(
                    "mixture component is {}x{}, expected {d}x{d}",
                    sigma.nrows(),
                    sigma.ncols()
                )));
            }
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(IclError::InvalidDistribution(format!("negative weight {w}")));
            }
            let scale = sigma.abs().max().max(1.0);
            if (sigma - sigma.transpose()).abs().max() > SPD_TOL * scale {
                return Err(IclError::InvalidDistribution("component is not symmetric".into()));
            }
            let eig = match scalar_multiple_of_identity(sigma) {
                Some(s) => vec![s],
                None => sym_eigenvalues(sigma),
            };
            if eig[0] < -SPD_TOL * scale {
                return Err(IclError::InvalidDistribution(format!(
                    "component has negative eigenvalue {}",
                    eig[0]
                )));
            }
            alpha = alpha.min(eig[0]);
            beta = beta.max(*eig.last().unwrap());
            atoms.push(Covariance::new(sigma.clone())?);
            weights.push(*w);
            total += w;
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(IclError::InvalidDistribution(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            kind: CovarianceKind::PointMassMixture(components),
            d,
            alpha,
            beta,
            atoms,
            weights,
        })
    }

    /// Uniform mixture of point masses on `s_i * I_d`.
    pub fn scaled_identities(d: usize, scalars: &[f64]) -> Result<Self> {
        let w = 1.0 / scalars.len().max(1) as f64;
        Self::point_masses(
            scalars
                .iter()
                .map(|&s| (Mat::identity(d, d) * s, w))
                .collect(),
        )
    }

    /// `Sigma = s I_d` with `s ~ Unif[lo, hi]`.
    pub fn scalar_uniform(d: usize, lo: f64, hi: f64) -> Result<Self> {
        if d == 0 || !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(IclError::InvalidDistribution(format!(
                "scalar uniform needs 0 < lo <= hi and d >= 1, got [{lo}, {hi}], d={d}"
            )));
        }
        Ok(Self {
            kind: CovarianceKind::ScalarUniform { lo, hi },
            d,
            alpha: lo,
            beta: hi,
            atoms: vec![],
            weights: vec![],
        })
    }

    /// `Sigma = s I_d`, `s = c + u` with `c` uniform over `centers` and `u ~ Unif[-w, w]`.
    pub fn windowed(d: usize, centers: &[f64], window: f64) -> Result<Self> {
        if d == 0 || centers.is_empty() || !(window >= 0.0) {
            return Err(IclError::InvalidDistribution(
                "windowed mixture needs d >= 1, centers and window >= 0".into(),
            ));
        }
        let lo = centers.iter().copied().fold(f64::INFINITY, f64::min) - window;
        let hi = centers.iter().copied().fold(f64::NEG_INFINITY, f64::max) + window;
        if !(lo > 0.0) {
            return Err(IclError::InvalidDistribution(format!(
                "window reaches non-positive scale {lo}"
            )));
        }
        Ok(Self {
            kind: CovarianceKind::WindowedMixture {
                centers: centers.to_vec(),
                window,
            },
            d,
            alpha: lo,
            beta: hi,
            atoms: vec![],
            weights: vec![],
        })
    }

    pub fn kind(&self) -> &CovarianceKind {
        &self.kind
    }
    pub fn dim(&self) -> usize {
        self.d
    }
    /// Smallest and largest eigenvalue over the support.
    pub fn eigen_range(&self) -> (f64, f64) {
        (self.alpha, self.beta)
    }

    pub fn is_discrete(&self) -> bool {
        matches!(
            self.kind,
            CovarianceKind::Fixed(_) | CovarianceKind::PointMassMixture(_)
        )
    }

    /// Draws one covariance.
    pub fn sample(&self, rng: &mut rng::Rng) -> Result<Cow<'_, Covariance>> {
        match &self.kind {
            CovarianceKind::Fixed(_) => Ok(Cow::Borrowed(&self.atoms[0])),
            CovarianceKind::PointMassMixture(_) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (atom, w) in self.atoms.iter().zip(&self.weights) {
                    acc += w;
                    if u < acc {
                        return Ok(Cow::Borrowed(atom));
                    }
                }
                Ok(Cow::Borrowed(self.atoms.last().unwrap()))
            }
            CovarianceKind::ScalarUniform { lo, hi } => {
                let s = if hi > lo { rng.random_range(*lo..*hi) } else { *lo };
                Covariance::scalar(s, self.d).map(Cow::Owned)
            }
            CovarianceKind::WindowedMixture { centers, window } => {
                let c = centers[rng.random_range(0..centers.len())];
                let off = if *window > 0.0 {
                    rng.random_range(-*window..*window)
                } else {
                    0.0
                };
                Covariance::scalar(c + off, self.d).map(Cow::Owned)
            }
        }
    }

    /// Weighted atoms whose average reproduces every expectation of a
    /// polynomial in `s` of degree `<= 2 * nodes - 1`; scalar families are
    /// discretized with a Gauss–Legendre rule on each interval.
    pub fn exact_components(&self, nodes: usize) -> Result<Vec<(Covariance, f64)>> {
        match &self.kind {
            CovarianceKind::Fixed(_) | CovarianceKind::PointMassMixture(_) => Ok(self
                .atoms
                .iter()
                .cloned()
                .zip(self.weights.iter().copied())
                .collect()),
            CovarianceKind::ScalarUniform { lo, hi } => {
                if hi == lo {
                    return Ok(vec![(Covariance::scalar(*lo, self.d)?, 1.0)]);
                }
                gl_on_interval(*lo, *hi, nodes, 1.0, self.d)
            }
            CovarianceKind::WindowedMixture { centers, window } => {
                let share = 1.0 / centers.len() as f64;
                let mut out = Vec::new();
                for &c in centers {
                    if *window == 0.0 {
                        out.push((Covariance::scalar(c, self.d)?, share));
                    } else {
                        out.extend(gl_on_interval(c - window, c + window, nodes, share, self.d)?);
                    }
                }
                Ok(out)
            }
        }
    }
}

fn gl_on_interval(lo: f64, hi: f64, nodes: usize, mass: f64, d: usize) -> Result<Vec<(Covariance, f64)>> {
    let (x, w) = gauss_legendre(nodes.max(1));
    let (mid, half) = ((hi + lo) / 2.0, (hi - lo) / 2.0);
    x.iter()
        .zip(&w)
        .map(|(x, w)| Ok((Covariance::scalar(mid + half * x, d)?, mass * w / 2.0)))
        .collect()
}

/// Samples an instance with the given covariance; `seed` drives the basis,
/// regressor and query substreams.
pub fn sample_instance_for(cov: &Covariance, n: usize, seed: u64) -> Result<RegressionInstance> {
    let d = cov.dim();
    if n < d || d == 0 {
        return Err(IclError::DimensionMismatch(format!(
            "need n >= d >= 1, got d={d}, n={n}"
        )));
    }
    let g = rng::normal_matrix(&mut rng::stream(seed, streams::BASIS), n, d);
    // n x d with orthonormal columns
    let q = g.qr().q();
    let x = match cov.as_scalar() {
        Some(s) => q.transpose() * s.sqrt(),
        None => cov.sqrt() * q.transpose(),
    };
    let z = rng::normal_vector(&mut rng::stream(seed, streams::REGRESSOR), d);
    let w_star = cov.inv_sqrt() * z;
    let z = rng::normal_vector(&mut rng::stream(seed, streams::QUERY), d);
    let x_q = cov.sqrt() * z;
    let y = x.transpose() * &w_star;
    Ok(RegressionInstance { x, w_star, y, x_q })
}

/// Draws `Sigma ~ dist`, then `X`, `w* ~ N(0, Sigma^{-1})`, `x_q ~ N(0, Sigma)`.
pub fn sample_instance(dist: &CovarianceDistribution, n: usize, seed: u64) -> Result<RegressionInstance> {
    let cov = dist.sample(&mut rng::stream(seed, streams::COVARIANCE))?;
    sample_instance_for(&cov, n, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpreadMethod {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpreadOutReport {
    pub eps: f64,
    pub delta: f64,
    pub threshold: f64,
    pub method: SpreadMethod,
    /// `P(||X^T v||^2 >= (1 - delta) beta)` per probed direction.
    pub estimates: Vec<f64>,
    pub min_estimate: f64,
    pub std_error: f64,
    pub is_spread_out: bool,
    pub indeterminate: bool,
}

/// Checks the `(eps, delta)` right-spread-out property on random directions.
///
/// Discrete laws are evaluated exactly; continuous ones by sampling
/// `num_samples` covariances per direction.
pub fn is_right_spread_out(
    dist: &CovarianceDistribution,
    eps: f64,
    delta: f64,
    num_directions: usize,
    num_samples: usize,
    seed: u64,
) -> Result<SpreadOutReport> {
    if !(0.0..=1.0).contains(&eps) || !(0.0..1.0).contains(&delta) || num_directions == 0 || num_samples == 0 {
        return Err(IclError::InvalidArgument(
            "need eps in [0,1], delta in [0,1), and positive counts".into(),
        ));
    }
    let (_, beta) = dist.eigen_range();
    let threshold = (1.0 - delta) * beta;
    // vᵀ(βI)v lands a few ulps either side of β
    let slack = 1e-12 * beta;
    let mut dir_rng = rng::stream(seed, streams::DIRECTIONS);
    let dirs: Vec<Vector> = (0..num_directions)
        .map(|_| rng::unit_vector(&mut dir_rng, dist.dim()))
        .collect();
    let method = if dist.is_discrete() {
        SpreadMethod::Exact
    } else {
        SpreadMethod::MonteCarlo
    };
    let mut estimates = Vec::with_capacity(num_directions);
    for (k, v) in dirs.iter().enumerate() {
        let p = match method {
            SpreadMethod::Exact => dist
                .atoms
                .iter()
                .zip(&dist.weights)
                .filter(|(a, _)| v.dot(&(a.sigma() * v)) >= threshold - slack)
                .map(|(_, w)| w)
                .sum(),
            SpreadMethod::MonteCarlo => {
                let mut r = rng::stream(rng::child_seed(seed, k as u64), streams::COVARIANCE);
                let mut hits = 0usize;
                for _ in 0..num_samples {
                    let cov = dist.sample(&mut r)?;
                    if v.dot(&(cov.sigma() * v)) >= threshold - slack {
                        hits += 1;
                    }
                }
                hits as f64 / num_samples as f64
            }
        };
        estimates.push(p);
    }
    let min_estimate = estimates.iter().copied().fold(f64::INFINITY, f64::min);
    let std_error = match method {
        SpreadMethod::Exact => 0.0,
        SpreadMethod::MonteCarlo => (min_estimate * (1.0 - min_estimate) / num_samples as f64).sqrt(),
    };
    Ok(SpreadOutReport {
        eps,
        delta,
        threshold,
        method,
        is_spread_out: min_estimate >= eps - WEIGHT_TOL,
        indeterminate: (min_estimate - eps).abs() < 2.0 * std_error,
        estimates,
        min_estimate,
        std_error,
    })
}
