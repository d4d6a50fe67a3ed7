//! Deterministic seeding: one 64-bit seed fans out into independent substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{Mat, Vector};

pub type Rng = ChaCha8Rng;

/// Substream identifiers used by instance sampling.
pub mod streams {
    pub const COVARIANCE: u64 = 0;
    pub const BASIS: u64 = 1;
    pub const REGRESSOR: u64 = 2;
    pub const QUERY: u64 = 3;
    pub const INIT: u64 = 4;
    pub const DIRECTIONS: u64 = 5;
}

/// An RNG for `(seed, stream)`; distinct streams never overlap.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives the seed of the `index`-th child task (SplitMix64 finalizer).
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal_vector(rng: &mut Rng, len: usize) -> Vector {
    Vector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

pub fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Uniformly distributed unit vector.
pub fn unit_vector(rng: &mut Rng, len: usize) -> Vector {
    loop {
        let v = normal_vector(rng, len);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Haar-ish random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn orthogonal(rng: &mut Rng, d: usize) -> Mat {
    let g = normal_matrix(rng, d, d);
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let signs = Mat::from_diagonal(&Vector::from_fn(d, |i, _| r[(i, i)].signum()));
    q * signs
}

/// Random SPD matrix with eigenvalues drawn uniformly from `[lo, hi]`
/// (the two extremes are pinned to `lo` and `hi` when `d >= 2`).
pub fn spd_with_spectrum(rng: &mut Rng, d: usize, lo: f64, hi: f64) -> Mat {
    use rand::Rng as _;
    let u = orthogonal(rng, d);
    let mut eig: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    if d >= 2 {
        eig[0] = lo;
        eig[d - 1] = hi;
    }
    let diag = Mat::from_diagonal(&Vector::from_vec(eig));
    let m = &u * diag * u.transpose();
    (&m + m.transpose()) * 0.5
}
