// SPDX-License-Identifier: Apache-2.0

//! Symmetric eigendecomposition, rank, and pseudo-inverse kernels.
//!
//! Rank is always relative: an eigenvalue counts when it exceeds
//! `rel_tol · max(λ_max, 0)`. Small negative eigenvalues produced by
//! round-off in estimated covariances are clamped to zero; anything more
//! negative than `rel_tol` times the spectral scale is rejected.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

pub const DEFAULT_REL_TOL: f64 = 1e-12;

/// Relative asymmetry accepted by [`sym_eig`] before symmetrizing.
pub const SYMMETRY_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Descending, with round-off negatives clamped to zero.
    pub eigenvalues: DVector<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
    pub rank: usize,
    pub rel_tol: f64,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `V diag(f(λ)) Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(usize, f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.eigenvectors.clone();
        for (i, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(i, self.eigenvalues[i]);
        }
        scaled * self.eigenvectors.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map_spectrum(|_, l| l)
    }
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn check_square(s: &DMatrix<f64>, operand: &'static str) -> Result<()> {
    if s.nrows() != s.ncols() {
        return Err(Error::mismatch(
            operand,
            "square matrix",
            format!("{}x{}", s.nrows(), s.ncols()),
        ));
    }
    Ok(())
}

/// Symmetric part `(S + Sᵀ)/2`, rejecting inputs that are not symmetric to
/// [`SYMMETRY_TOL`] relative Frobenius norm.
pub fn symmetrize(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(s, "S")?;
    let scale = s.norm();
    let deviation = if scale > 0.0 {
        (s - s.transpose()).norm() / scale
    } else {
        0.0
    };
    if !deviation.is_finite() || deviation > SYMMETRY_TOL {
        return Err(Error::Asymmetric { deviation });
    }
    Ok((s + s.transpose()) * 0.5)
}

pub fn sym_eig(s: &DMatrix<f64>, rel_tol: f64) -> Result<SpectralDecomposition> {
    let sym = symmetrize(s)?;
    let n = sym.nrows();
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::NoConvergence);
    }
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, MAX_SWEEPS).ok_or(Error::NoConvergence)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let scale = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let lambda_max = order.first().map_or(0.0, |&i| eig.eigenvalues[i]).max(0.0);

    let mut eigenvalues = DVector::zeros(n);
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut l = eig.eigenvalues[src];
        if l < 0.0 {
            if -l > rel_tol * scale {
                return Err(Error::NotPsd {
                    eigenvalue: l,
                    scale,
                });
            }
            l = 0.0;
        }
        eigenvalues[dst] = l;
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    let rank = eigenvalues
        .iter()
        .filter(|&&l| l > rel_tol * lambda_max)
        .count();

    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
        rank,
        rel_tol,
    })
}

/// `(D^{1/2})⁺` as a vector together with the range pattern `I_ñ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PinvSqrt {
    pub inv_sqrt: DVector<f64>,
    /// 1 for directions counted in the rank, 0 elsewhere.
    pub range: DVector<f64>,
}

pub fn pinv_sqrt(dec: &SpectralDecomposition) -> PinvSqrt {
    let n = dec.dim();
    let mut inv_sqrt = DVector::zeros(n);
    let mut range = DVector::zeros(n);
    // Eigenvalues are sorted, so the rank directions are the leading ones.
    for i in 0..dec.rank {
        inv_sqrt[i] = dec.eigenvalues[i].sqrt().recip();
        range[i] = 1.0;
    }
    PinvSqrt { inv_sqrt, range }
}

pub fn pinv_from(dec: &SpectralDecomposition) -> DMatrix<f64> {
    dec.map_spectrum(|i, l| if i < dec.rank { l.recip() } else { 0.0 })
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix.
pub fn pinv(s: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    Ok(pinv_from(&sym_eig(s, rel_tol)?))
}

/// Symmetric square root of a PSD matrix.
pub fn sqrt_psd(s: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let dec = sym_eig(s, rel_tol)?;
    Ok(dec.map_spectrum(|_, l| l.sqrt()))
}

/// Solution `P` of the discrete Lyapunov equation `P = A P Aᵀ + Q`, i.e. the
/// stationary covariance of `s(t) = A s(t−1) + w(t)` with `Cov(w) = Q`.
/// Requires spectral radius of `A` below one.
pub fn stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(a, "A")?;
    if q.shape() != a.shape() {
        return Err(Error::mismatch(
            "Q",
            format!("{}x{}", a.nrows(), a.ncols()),
            format!("{}x{}", q.nrows(), q.ncols()),
        ));
    }
    // Doubling: P_{k+1} = P_k + A_k P_k A_kᵀ, A_{k+1} = A_k².
    let mut p = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let delta = &ak * &p * ak.transpose();
        p += &delta;
        ak = &ak * &ak;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "Lyapunov iteration diverged; spectral radius must be below 1".into(),
            ));
        }
        if delta.norm() <= 1e-17 * p.norm() {
            return Ok((&p + p.transpose()) * 0.5);
        }
    }
    Err(Error::NoConvergence)
}

/// Largest eigenvalue magnitude of a general square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |m, z| m.max(z.norm()))
}
