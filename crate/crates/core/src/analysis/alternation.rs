//! Certificate that the shifted Chebyshev polynomial used by the lower-bound
//! argument has the claimed value at zero, alternation and robust intervals.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{IclError, Result};
use crate::linalg::chebyshev_t;

#[derive(Debug, Clone, Serialize)]
pub struct AlternationCertificate {
    pub k: usize,
    /// `Q_k(0)`; its magnitude must stay `<= 4`.
    pub q_at_zero: f64,
    /// `(gamma_i, Q_k(gamma_i))` at the `k + 1` mapped extrema.
    pub extrema: Vec<(f64, f64)>,
    pub alternates: bool,
    /// Widest interval around an extremum on which `|Q_k| >= 1/2`.
    pub robust_interval: (f64, f64),
    pub robust_width: f64,
    /// `pi^2 / (64 k^2) * (lam_max - lam_min)`.
    pub width_bound: f64,
    pub passes: bool,
}

/// `Q_k(g) = T_k((2 g - (lam_min + lam_max)) / (lam_max - lam_min))`.
pub fn shifted_chebyshev(k: usize, lam_min: f64, lam_max: f64, g: f64) -> f64 {
    chebyshev_t(k, (2.0 * g - (lam_min + lam_max)) / (lam_max - lam_min))
}

pub fn chebyshev_alternation_check(k: usize, lam_min: f64, lam_max: f64) -> Result<AlternationCertificate> {
    if k == 0 || !(lam_min > 0.0) || !(lam_max > lam_min) {
        return Err(IclError::InvalidArgument(format!(
            "need k >= 1 and 0 < lam_min < lam_max, got k={k}, [{lam_min}, {lam_max}]"
        )));
    }
    if k as f64 > lam_max.sqrt() / (6.0 * lam_min.sqrt()) {
        return Err(IclError::Regime(format!(
            "k = {k} exceeds sqrt(lam_max) / (6 sqrt(lam_min)) = {}",
            lam_max.sqrt() / (6.0 * lam_min.sqrt())
        )));
    }
    let (mid, half) = ((lam_max + lam_min) / 2.0, (lam_max - lam_min) / 2.0);
    let at = |theta: f64| mid + half * theta.cos();
    let q = |g: f64| shifted_chebyshev(k, lam_min, lam_max, g);
    let q_at_zero = q(0.0);

    let kf = k as f64;
    let extrema: Vec<(f64, f64)> = (0..=k).map(|i| at(i as f64 * PI / kf)).map(|g| (g, q(g))).collect();
    let alternates = extrema
        .iter()
        .enumerate()
        .all(|(i, &(_, v))| (v - if i % 2 == 0 { 1.0 } else { -1.0 }).abs() <= 1e-9);

    // |cos(k theta)| >= 1/2 for |theta - i pi / k| <= pi / (3k)
    let mut robust_interval = (0.0, 0.0);
    let mut robust_width = -1.0;
    for i in 0..=k {
        let c = i as f64 * PI / kf;
        let (t0, t1) = ((c - PI / (3.0 * kf)).max(0.0), (c + PI / (3.0 * kf)).min(PI));
        let (a, b) = (at(t1), at(t0));
        if b - a > robust_width {
            robust_width = b - a;
            robust_interval = (a, b);
        }
    }
    let (a, b) = robust_interval;
    let holds_on_interval = (0..=256)
        .map(|j| a + (b - a) * j as f64 / 256.0)
        .all(|g| q(g).abs() >= 0.5 - 1e-12);
    let width_bound = PI * PI / (64.0 * kf * kf) * (lam_max - lam_min);
    Ok(AlternationCertificate {
        k,
        q_at_zero,
        passes: q_at_zero.abs() <= 4.0 && alternates && holds_on_interval && robust_width >= width_bound,
        extrema,
        alternates,
        robust_interval,
        robust_width,
        width_bound,
    })
}
