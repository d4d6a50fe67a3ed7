//! Small dense helpers on top of `nalgebra`: symmetric factorizations,
//! spectral norms, Gauss–Legendre rules and Chebyshev polynomials.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{IclError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Eigenvalues below this fraction of the largest one mark a covariance as singular.
pub const SINGULAR_REL_TOL: f64 = 1e-12;

/// A symmetric positive definite covariance with its square root and inverses
/// precomputed from one eigendecomposition.
#[derive(Debug, Clone)]
pub struct Covariance {
    sigma: Mat,
    sqrt: Mat,
    inv_sqrt: Mat,
    inverse: Mat,
    eigenvalues: Vector,
    scalar: Option<f64>,
}

impl Covariance {
    pub fn new(sigma: Mat) -> Result<Self> {
        if !sigma.is_square() {
            return Err(IclError::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let d = sigma.nrows();
        if let Some(s) = scalar_multiple_of_identity(&sigma) {
            return Self::scalar(s, d);
        }
        let sym = symmetrize(&sigma);
        let eig = SymmetricEigen::new(sym.clone());
        let max_eig = eig.eigenvalues.max();
        let min_eig = eig.eigenvalues.min();
        if !(max_eig > 0.0) || min_eig <= SINGULAR_REL_TOL * max_eig {
            return Err(IclError::SingularCovariance { min_eig, max_eig });
        }
        let v = &eig.eigenvectors;
        let with = |f: &dyn Fn(f64) -> f64| {
            let diag = Mat::from_diagonal(&eig.eigenvalues.map(f));
            v * diag * v.transpose()
        };
        let sqrt = with(&|l| l.sqrt());
        let inv_sqrt = with(&|l| 1.0 / l.sqrt());
        let inverse = with(&|l| 1.0 / l);
        Ok(Self {
            sigma: sym,
            sqrt,
            inv_sqrt,
            inverse,
            eigenvalues: eig.eigenvalues,
            scalar: None,
        })
    }

    /// `s * I_d` without an eigendecomposition.
    pub fn scalar(s: f64, d: usize) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(IclError::SingularCovariance {
                min_eig: s,
                max_eig: s,
            });
        }
        let eye = Mat::identity(d, d);
        Ok(Self {
            sigma: &eye * s,
            sqrt: &eye * s.sqrt(),
            inv_sqrt: &eye / s.sqrt(),
            inverse: &eye / s,
            eigenvalues: Vector::from_element(d, s),
            scalar: Some(s),
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
    pub fn sigma(&self) -> &Mat {
        &self.sigma
    }
    pub fn sqrt(&self) -> &Mat {
        &self.sqrt
    }
    pub fn inv_sqrt(&self) -> &Mat {
        &self.inv_sqrt
    }
    pub fn inverse(&self) -> &Mat {
        &self.inverse
    }
    pub fn eigenvalues(&self) -> &Vector {
        &self.eigenvalues
    }
    /// `Some(s)` when the covariance is `s * I`.
    pub fn as_scalar(&self) -> Option<f64> {
        self.scalar
    }
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.min()
    }
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.max()
    }
}

/// Returns `Some(s)` if `m == s * I` exactly.
pub fn scalar_multiple_of_identity(m: &Mat) -> Option<f64> {
    if !m.is_square() || m.nrows() == 0 {
        return None;
    }
    let s = m[(0, 0)];
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let expect = if i == j { s } else { 0.0 };
            if m[(i, j)] != expect {
                return None;
            }
        }
    }
    Some(s)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Replaces the spectrum of the symmetric part of `m` by its clamp into `[lo, hi]`.
pub fn clamp_spectrum(m: &Mat, lo: f64, hi: f64) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    let diag = Mat::from_diagonal(&eig.eigenvalues.map(|l| l.clamp(lo, hi)));
    &eig.eigenvectors * diag * eig.eigenvectors.transpose()
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` via the Golub–Welsch eigenproblem.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1, "quadrature needs at least one node");
    let mut jacobi = Mat::zeros(m, m);
    for k in 1..m {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], 2.0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Chebyshev polynomial of the first kind, `T_k(x)`, by the three-term recurrence.
pub fn chebyshev_t(k: usize, x: f64) -> f64 {
    match k {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            for _ in 1..k {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Frobenius inner product.
pub fn frobenius_dot(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
