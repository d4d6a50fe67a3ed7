//! Forward passes of the linear / ReLU attention models.
//!
//! Restricted weights store `A` per unit of covariance: the attention block
//! that acts on the prompt is `Q = n A`, so the `1/n` prefactor of the update
//! cancels and `Sigma^{-1}` is a one-step exact solve for every `n`.

use serde::{Deserialize, Serialize};

use crate::error::{IclError, Result};
use crate::instances::{assemble_prompt, PromptMatrix, RegressionInstance};
use crate::linalg::{all_finite, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    pub fn apply(self, m: &mut Mat) {
        if self == Activation::Relu {
            m.apply(|x| *x = x.max(0.0));
        }
    }

    pub fn apply_vec(self, v: &mut Vector) {
        if self == Activation::Relu {
            v.apply(|x| *x = x.max(0.0));
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedLayer {
    pub a: Mat,
    pub u: Vector,
}

/// Per-layer `(A, u)` pairs, or a single shared pair for looped models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedWeights {
    layers: Vec<RestrictedLayer>,
    activation: Activation,
    shared: bool,
}

impl RestrictedWeights {
    pub fn multilayer(layers: Vec<RestrictedLayer>, activation: Activation) -> Result<Self> {
        Self::build(layers, activation, false)
    }

    pub fn looped(layer: RestrictedLayer, activation: Activation) -> Result<Self> {
        Self::build(vec![layer], activation, true)
    }

    /// Linear multilayer weights with `u = 0`.
    pub fn from_matrices(a: Vec<Mat>) -> Result<Self> {
        let layers = a
            .into_iter()
            .map(|a| {
                let d = a.nrows();
                RestrictedLayer { a, u: Vector::zeros(d) }
            })
            .collect();
        Self::multilayer(layers, Activation::Linear)
    }

    /// Linear looped weights with `u = 0`.
    pub fn looped_matrix(a: Mat) -> Result<Self> {
        let d = a.nrows();
        Self::looped(RestrictedLayer { a, u: Vector::zeros(d) }, Activation::Linear)
    }

    fn build(layers: Vec<RestrictedLayer>, activation: Activation, shared: bool) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(IclError::InvalidArgument("weights need at least one layer".into()));
        };
        let d = first.a.nrows();
        for (t, l) in layers.iter().enumerate() {
            if l.a.shape() != (d, d) || l.u.len() != d {
                return Err(IclError::DimensionMismatch(format!(
                    "layer {t}: A is {:?}, |u| = {}, expected d = {d}",
                    l.a.shape(),
                    l.u.len()
                )));
            }
        }
        Ok(Self { layers, activation, shared })
    }

    pub fn d(&self) -> usize {
        self.layers[0].a.nrows()
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn is_shared(&self) -> bool {
        self.shared
    }
    /// Stored layers: one for looped models.
    pub fn layers(&self) -> &[RestrictedLayer] {
        &self.layers
    }
    pub fn layers_mut(&mut self) -> &mut [RestrictedLayer] {
        &mut self.layers
    }

    /// The layer applied at step `t`.
    pub fn layer(&self, t: usize) -> &RestrictedLayer {
        if self.shared {
            &self.layers[0]
        } else {
            &self.layers[t]
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn has_zero_u(&self) -> bool {
        self.layers.iter().all(|l| l.u.iter().all(|&x| x == 0.0))
    }

    /// Checks that `depth` layers can be run.
    pub fn check_depth(&self, depth: usize) -> Result<()> {
        if !self.shared && depth != self.layers.len() {
            return Err(IclError::InvalidArgument(format!(
                "multilayer weights store {} layers but depth {depth} was requested",
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// The `A` matrices applied over `depth` steps, in order.
    pub fn a_sequence(&self, depth: usize) -> Vec<&Mat> {
        (0..depth).map(|t| &self.layer(t).a).collect()
    }

    /// The first `depth` layers of a multilayer model (looped models are returned unchanged).
    pub fn prefix(&self, depth: usize) -> Result<Self> {
        if self.shared {
            return Ok(self.clone());
        }
        if depth == 0 || depth > self.layers.len() {
            return Err(IclError::InvalidArgument(format!(
                "prefix depth {depth} outside 1..={}",
                self.layers.len()
            )));
        }
        Self::build(self.layers[..depth].to_vec(), self.activation, false)
    }

    /// Embeds into unrestricted weights for `depth` steps on prompts with `n` examples:
    /// `Q = [[n A, 0], [0, 0]]`, `P = [[0, 0], [u^T, 1]]`.
    pub fn to_full(&self, depth: usize, n: usize) -> Result<FullWeights> {
        self.check_depth(depth)?;
        let d = self.d();
        let layers = (0..depth)
            .map(|t| {
                let l = self.layer(t);
                let mut q = Mat::zeros(d + 1, d + 1);
                q.view_mut((0, 0), (d, d)).copy_from(&(&l.a * n as f64));
                let mut p = Mat::zeros(d + 1, d + 1);
                p.view_mut((d, 0), (1, d)).copy_from(&l.u.transpose());
                p[(d, d)] = 1.0;
                FullLayer { p, q }
            })
            .collect();
        FullWeights::new(layers, self.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullLayer {
    pub p: Mat,
    pub q: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullWeights {
    layers: Vec<FullLayer>,
    activation: Activation,
}

impl FullWeights {
    pub fn new(layers: Vec<FullLayer>, activation: Activation) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(IclError::InvalidArgument("weights need at least one layer".into()));
        };
        let k = first.p.nrows();
        for (t, l) in layers.iter().enumerate() {
            if l.p.shape() != (k, k) || l.q.shape() != (k, k) {
                return Err(IclError::DimensionMismatch(format!(
                    "layer {t}: P is {:?}, Q is {:?}, expected {k}x{k}",
                    l.p.shape(),
                    l.q.shape()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn d(&self) -> usize {
        self.layers[0].p.nrows() - 1
    }
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
    pub fn layers(&self) -> &[FullLayer] {
        &self.layers
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
}

/// Per-layer states, `t = 0..=L`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerTrace {
    Restricted { y: Vec<Vector>, y_q: Vec<f64> },
    Full { z: Vec<Mat> },
}

impl LayerTrace {
    pub fn len(&self) -> usize {
        match self {
            LayerTrace::Restricted { y_q, .. } => y_q.len(),
            LayerTrace::Full { z } => z.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The raw query entry at every depth.
    pub fn query_entries(&self) -> Vec<f64> {
        match self {
            LayerTrace::Restricted { y_q, .. } => y_q.clone(),
            LayerTrace::Full { z } => z.iter().map(|z| z[(z.nrows() - 1, z.ncols() - 1)]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `-y_q^{(L)}`: tends to `w*^T x_q` for a good model.
    pub prediction: f64,
    pub trace: LayerTrace,
}

impl ForwardOutput {
    /// The raw final query entry `y_q^{(L)}`.
    pub fn raw_query(&self) -> f64 {
        -self.prediction
    }
}

/// Runs `Z <- Z - (1/n) P Z M act(Z^T Q Z)` with `M = diag(I_n, 0)`.
pub fn forward_full(z0: &PromptMatrix, w: &FullWeights) -> Result<ForwardOutput> {
    if z0.d() != w.d() {
        return Err(IclError::DimensionMismatch(format!(
            "prompt has d = {} but weights have d = {}",
            z0.d(),
            w.d()
        )));
    }
    let n = z0.n();
    let mut z = z0.matrix().clone();
    let mut states = Vec::with_capacity(w.depth() + 1);
    states.push(z.clone());
    for (t, layer) in w.layers().iter().enumerate() {
        let mut scores = z.transpose() * &layer.q * &z;
        w.activation().apply(&mut scores);
        let mut zm = &layer.p * &z;
        zm.column_mut(n).fill(0.0);
        z -= zm * scores / n as f64;
        if !all_finite(&z) {
            return Err(IclError::NonFinite { layer: t + 1 });
        }
        states.push(z.clone());
    }
    let prediction = -z[(z.nrows() - 1, n)];
    Ok(ForwardOutput {
        prediction,
        trace: LayerTrace::Full { z: states },
    })
}

/// Runs the restricted recursion on `(y, y_q)` and records every state.
pub fn forward_restricted(inst: &RegressionInstance, w: &RestrictedWeights, depth: usize) -> Result<ForwardOutput> {
    let mut ys = Vec::with_capacity(depth + 1);
    let mut yqs = Vec::with_capacity(depth + 1);
    let y_q = run_restricted(inst, w, depth, |_, y, y_q| {
        ys.push(y.clone());
        yqs.push(y_q);
    })?;
    Ok(ForwardOutput {
        prediction: -y_q,
        trace: LayerTrace::Restricted { y: ys, y_q: yqs },
    })
}

/// `forward_restricted` without the trace.
pub fn predict_restricted(inst: &RegressionInstance, w: &RestrictedWeights, depth: usize) -> Result<f64> {
    run_restricted(inst, w, depth, |_, _, _| {}).map(|y_q| -y_q)
}

/// The restricted recursion; `observe(t, y, y_q)` sees every state `t = 0..=depth`.
/// Returns the raw `y_q^{(depth)}`.
pub fn run_restricted<F>(inst: &RegressionInstance, w: &RestrictedWeights, depth: usize, mut observe: F) -> Result<f64>
where
    F: FnMut(usize, &Vector, f64),
{
    w.check_depth(depth)?;
    if inst.d() != w.d() {
        return Err(IclError::DimensionMismatch(format!(
            "instance has d = {} but weights have d = {}",
            inst.d(),
            w.d()
        )));
    }
    let x = inst.x();
    let x_q = inst.x_q();
    let mut y = inst.y().clone();
    let mut y_q = 0.0;
    observe(0, &y, y_q);
    for t in 0..depth {
        let layer = w.layer(t);
        // v^T = y^T + u^T X
        let v = &y + x.transpose() * &layer.u;
        match w.activation() {
            Activation::Linear => {
                // v^T X^T A [X, x_q]
                let g = layer.a.transpose() * (x * &v);
                y -= x.transpose() * &g;
                y_q -= g.dot(x_q);
            }
            Activation::Relu => {
                let ax = &layer.a * x;
                let mut s = x.transpose() * &ax;
                w.activation().apply(&mut s);
                let mut sq = x.transpose() * (&layer.a * x_q);
                w.activation().apply_vec(&mut sq);
                y -= s.transpose() * &v;
                y_q -= v.dot(&sq);
            }
        }
        if !y_q.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(IclError::NonFinite { layer: t + 1 });
        }
        observe(t + 1, &y, y_q);
    }
    Ok(y_q)
}

/// `G x_q` with `G = prod_i (I - Sigma A_i)`, applied right to left.
fn residual_operator_on_query(inst: &RegressionInstance, w: &RestrictedWeights, depth: usize) -> Result<Vector> {
    if w.activation() != Activation::Linear {
        return Err(IclError::ClosedFormUnavailable("ReLU activation"));
    }
    if !w.has_zero_u() {
        return Err(IclError::ClosedFormUnavailable("nonzero u"));
    }
    w.check_depth(depth)?;
    let sigma = inst.sigma();
    let mut g = inst.x_q().clone();
    for t in (0..depth).rev() {
        g -= &sigma * (&w.layer(t).a * &g);
    }
    Ok(g)
}

/// `w*^T (I - prod_i (I - Sigma A_i)) x_q` for linear, `u = 0` weights.
pub fn closed_form_prediction(inst: &RegressionInstance, w: &RestrictedWeights, depth: usize) -> Result<f64> {
    let g = residual_operator_on_query(inst, w, depth)?;
    Ok(inst.w_star().dot(&(inst.x_q() - &g)))
}

/// `target - prediction = w*^T G x_q`, without the cancellation of subtracting
/// two nearly equal numbers.
pub fn closed_form_residual(inst: &RegressionInstance, w: &RestrictedWeights, depth: usize) -> Result<f64> {
    let g = residual_operator_on_query(inst, w, depth)?;
    Ok(inst.w_star().dot(&g))
}

/// Convenience: build the prompt and run the full model.
pub fn forward_full_on(inst: &RegressionInstance, w: &FullWeights) -> Result<ForwardOutput> {
    forward_full(&assemble_prompt(inst), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{sample_instance_for, CovarianceDistribution};
    use crate::linalg::Covariance;
    use crate::rng::{self, spd_with_spectrum};
    use approx::assert_relative_eq;

    fn scalar_instance() -> RegressionInstance {
        RegressionInstance::new(
            Mat::from_element(1, 1, 1.0),
            Vector::from_element(1, 1.0),
            Vector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn scalar_recurrence_matches_hand_unrolled() {
        let inst = scalar_instance();
        for &eta in &[0.3, 0.9, 1.5] {
            let w = RestrictedWeights::looped_matrix(Mat::from_element(1, 1, eta)).unwrap();
            for l in 0..8 {
                // y_q' = y_q - y * eta, y' = y (1 - eta)
                let (mut y, mut yq) = (1.0f64, 0.0f64);
                for _ in 0..l {
                    yq -= y * eta;
                    y *= 1.0 - eta;
                }
                let p = predict_restricted(&inst, &w, l).unwrap();
                assert_relative_eq!(p, -yq, epsilon = 1e-14);
                assert_relative_eq!(p, 1.0 - (1.0 - eta).powi(l as i32), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn inverse_covariance_is_one_step_exact() {
        let mut r = rng::stream(3, 0);
        let sigma = spd_with_spectrum(&mut r, 3, 1.0, 5.0);
        let cov = Covariance::new(sigma).unwrap();
        let inst = sample_instance_for(&cov, 6, 9).unwrap();
        let w = RestrictedWeights::from_matrices(vec![cov.inverse().clone()]).unwrap();
        let p = predict_restricted(&inst, &w, 1).unwrap();
        assert_relative_eq!(p, inst.target(), max_relative = 1e-10);
        assert_relative_eq!(closed_form_prediction(&inst, &w, 1).unwrap(), inst.target(), max_relative = 1e-10);
    }

    #[test]
    fn zero_weights_predict_zero() {
        let dist = CovarianceDistribution::fixed(Mat::identity(2, 2)).unwrap();
        let inst = crate::instances::sample_instance(&dist, 3, 1).unwrap();
        let w = RestrictedWeights::looped_matrix(Mat::zeros(2, 2)).unwrap();
        assert_eq!(predict_restricted(&inst, &w, 5).unwrap(), 0.0);
        let full = FullWeights::new(
            vec![FullLayer { p: Mat::zeros(3, 3), q: Mat::identity(3, 3) }],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(forward_full_on(&inst, &full).unwrap().prediction, 0.0);
        let full = FullWeights::new(
            vec![FullLayer { p: Mat::identity(3, 3), q: Mat::zeros(3, 3) }],
            Activation::Linear,
        )
        .unwrap();
        assert_eq!(forward_full_on(&inst, &full).unwrap().prediction, 0.0);
    }

    #[test]
    fn embedding_matches_restricted_both_activations() {
        let mut r = rng::stream(5, 7);
        let cov = Covariance::new(spd_with_spectrum(&mut r, 3, 1.0, 3.0)).unwrap();
        let inst = sample_instance_for(&cov, 5, 2).unwrap();
        let layers: Vec<_> = (0..3)
            .map(|_| RestrictedLayer {
                a: rng::normal_matrix(&mut r, 3, 3) * 0.2,
                u: rng::normal_vector(&mut r, 3) * 0.3,
            })
            .collect();
        for act in [Activation::Linear, Activation::Relu] {
            let w = RestrictedWeights::multilayer(layers.clone(), act).unwrap();
            let a = forward_restricted(&inst, &w, 3).unwrap();
            let b = forward_full_on(&inst, &w.to_full(3, inst.n()).unwrap()).unwrap();
            assert_relative_eq!(a.prediction, b.prediction, epsilon = 1e-12, max_relative = 1e-12);
            // the feature block never moves
            if let LayerTrace::Full { z } = &b.trace {
                for zt in z {
                    assert_relative_eq!(zt.view((0, 0), (3, 5)).into_owned(), inst.x().clone(), epsilon = 0.0);
                }
            }
            assert_eq!(a.trace.len(), 4);
        }
    }

    #[test]
    fn closed_form_rejects_relu_and_u() {
        let inst = scalar_instance();
        let w = RestrictedWeights::looped_matrix(Mat::from_element(1, 1, 0.5))
            .unwrap()
            .with_activation(Activation::Relu);
        assert!(matches!(
            closed_form_prediction(&inst, &w, 2),
            Err(IclError::ClosedFormUnavailable(_))
        ));
        let w = RestrictedWeights::looped(
            RestrictedLayer { a: Mat::from_element(1, 1, 0.5), u: Vector::from_element(1, 1.0) },
            Activation::Linear,
        )
        .unwrap();
        assert!(closed_form_prediction(&inst, &w, 2).is_err());
    }

    #[test]
    fn overflow_reports_layer() {
        let inst = scalar_instance();
        let w = RestrictedWeights::looped_matrix(Mat::from_element(1, 1, 1e80)).unwrap();
        match predict_restricted(&inst, &w, 10) {
            Err(IclError::NonFinite { layer }) => assert!((2..=10).contains(&layer)),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn multilayer_depth_must_match() {
        let w = RestrictedWeights::from_matrices(vec![Mat::identity(1, 1); 2]).unwrap();
        assert!(predict_restricted(&scalar_instance(), &w, 3).is_err());
    }
}
