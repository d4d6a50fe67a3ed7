#![allow(dead_code)]

use icl_core::attention::{Activation, RestrictedLayer, RestrictedWeights};
use icl_core::instances::CovarianceDistribution;
use icl_core::linalg::Mat;
use icl_core::rng::{self, Rng};

pub fn random_spd_dist(r: &mut Rng, d: usize, kappa: f64) -> CovarianceDistribution {
    CovarianceDistribution::fixed(rng::spd_with_spectrum(r, d, 1.0, kappa)).unwrap()
}

/// Linear weights near `I / kappa`, so products stay bounded on spectra in `[1, kappa]`.
pub fn random_linear_weights(r: &mut Rng, d: usize, depth: usize, kappa: f64, looped: bool) -> RestrictedWeights {
    let mut draw = || {
        let g = rng::normal_matrix(r, d, d);
        Mat::identity(d, d) / kappa + g * (0.3 / (kappa * d as f64))
    };
    if looped {
        RestrictedWeights::looped_matrix(draw()).unwrap()
    } else {
        RestrictedWeights::from_matrices((0..depth).map(|_| draw()).collect()).unwrap()
    }
}

pub fn random_general_weights(r: &mut Rng, d: usize, depth: usize, act: Activation) -> RestrictedWeights {
    let layers = (0..depth)
        .map(|_| RestrictedLayer {
            a: rng::normal_matrix(r, d, d) * (0.3 / d as f64),
            u: rng::normal_vector(r, d) * 0.3,
        })
        .collect();
    RestrictedWeights::multilayer(layers, act).unwrap()
}
