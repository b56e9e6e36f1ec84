// SPDX-License-Identifier: Apache-2.0

//! Embedded numerical checks run by `ipc-lab selftest`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::basis::{enumerate_basis, TargetEvaluator};
use crate::capacity::capacity;
use crate::fixtures;
use crate::linalg::{pinv, rel_frobenius, DEFAULT_REL_TOL};
use crate::noise::{self, estimate_moments, ipc_bound, normalize_noise, raw_second_moment, BoundExperiment, MomentDecomposition};
use crate::reservoir::{self, ensemble_run, NoiseLocation, ReservoirKind, ReservoirSpec};
use crate::seeds::{self, StreamSeeds};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    /// Observed deviation from the expected value.
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub tol_scale: f64,
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(["check", "deviation", "tolerance", "pass"]).map_err(io)?;
        for c in &self.checks {
            w.write_record([
                c.name.to_string(),
                format!("{:.6e}", c.deviation),
                format!("{:.6e}", c.tolerance),
                c.pass.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        crate::cli::write_atomic(path, &bytes)
    }
}

type CheckFn = fn() -> Result<f64>;

/// Name, nominal tolerance, and a function returning the deviation.
const CHECKS: &[(&str, f64, CheckFn)] = &[
    ("scalar_channel_capacity", 0.02, scalar_channel),
    ("orthonormal_bound", 1e-6, orthonormal_bound),
    ("moment_decomposition_identity", 1e-10, decomposition_identity),
    ("capacity_scale_invariance", 1e-8, scale_invariance),
    ("capacity_output_basis_invariance", 1e-8, output_basis_invariance),
    ("pseudoinverse_penrose", 1e-9, penrose),
    ("legendre_gram_orthonormality", 5.0 / 316.227_766_016_837_94, legendre_gram),
    ("bound_output_basis_invariance", 1e-8, bound_basis_invariance),
    ("measured_within_bound", 0.05, measured_within_bound),
    ("two_path_error_agreement", 0.02, two_path_agreement),
];

/// Run every check with tolerances multiplied by `tol_scale`.
pub fn run_selftest(tol_scale: f64) -> Result<SelftestReport> {
    if !(tol_scale.is_finite() && tol_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("tol_scale must be >= 0, got {tol_scale}")));
    }
    let mut checks = Vec::with_capacity(CHECKS.len());
    for &(name, tol, f) in CHECKS {
        let deviation = f()?;
        let tolerance = tol * tol_scale;
        log::info!("selftest {name}: deviation {deviation:.3e}, tolerance {tolerance:.3e}");
        checks.push(Check {
            name,
            deviation,
            tolerance,
            pass: deviation.is_finite() && deviation <= tolerance,
        });
    }
    Ok(SelftestReport { tol_scale, checks })
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeds::rng(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

fn uniform_inputs(len: usize, seed: u64) -> Vec<f64> {
    reservoir::draw_inputs(1, len, seed).iter().copied().collect()
}

/// x = u + ξ with unit-variance noise against y = √3 u: capacity 1/2.
fn scalar_channel() -> Result<f64> {
    let t = 100_000;
    let u = uniform_inputs(t, 101);
    let noise = gaussian(1, t, 102);
    let var_u: f64 = 1.0 / 3.0;
    let x = DMatrix::from_fn(1, t, |_, s| u[s] + var_u.sqrt() * noise[(0, s)]);
    let y: Vec<f64> = u.iter().map(|v| 3f64.sqrt() * v).collect();
    Ok((capacity(&x, &y)? - 0.5).abs())
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

fn orthonormal_bound() -> Result<f64> {
    let sig = [0.1, 0.5, 1.0, 2.0];
    let dec = MomentDecomposition::from_parts(DMatrix::identity(4, 4), diag(&sig), 1, 1)?;
    let nn = normalize_noise(&dec, DEFAULT_REL_TOL)?;
    let expected: f64 = sig.iter().map(|s| 1.0 / (1.0 + s)).sum();
    Ok((ipc_bound(&nn) - expected).abs())
}

fn noisy_linear(n: usize, location: NoiseLocation) -> Result<ReservoirSpec> {
    ReservoirSpec::generate(ReservoirKind::Linear, n, 1, 0.6, 1.0, 7)?
        .with_noise(location, DMatrix::identity(n, n) * 0.2)
}

fn decomposition_identity() -> Result<f64> {
    let spec = noisy_linear(4, NoiseLocation::Output)?;
    let ens = ensemble_run(&spec, &StreamSeeds::new(11), 2_000, 200, 30)?;
    let dec = estimate_moments(&ens)?;
    Ok(rel_frobenius(&(&dec.q_eta + &dec.q_xi), &raw_second_moment(&ens)))
}

fn scale_invariance() -> Result<f64> {
    let x = gaussian(4, 500, 21);
    let y: Vec<f64> = gaussian(1, 500, 22).iter().map(|v| v + 0.3).collect();
    let base = capacity(&x, &y)?;
    let mut worst = 0f64;
    for alpha in [-7.5, 1e-3, 0.5, 42.0, 1e3] {
        let ys: Vec<f64> = y.iter().map(|v| alpha * v).collect();
        worst = worst.max((capacity(&x, &ys)? - base).abs());
    }
    Ok(worst)
}

fn output_basis_invariance() -> Result<f64> {
    let x = gaussian(4, 500, 31);
    let y: Vec<f64> = (0..500).map(|s| x[(0, s)] - 0.5 * x[(2, s)] + (s as f64 * 0.1).sin()).collect();
    let g = gaussian(4, 4, 32) + DMatrix::identity(4, 4) * 3.0;
    Ok((capacity(&(&g * &x), &y)? - capacity(&x, &y)?).abs())
}

fn penrose() -> Result<f64> {
    // Rank 3 in dimension 6.
    let f = gaussian(6, 3, 41);
    let s = &f * f.transpose();
    let a = pinv(&s, DEFAULT_REL_TOL)?;
    let sa = &s * &a;
    let as_ = &a * &s;
    Ok([
        rel_frobenius(&(&sa * &s), &s),
        rel_frobenius(&(&as_ * &a), &a),
        rel_frobenius(&sa.transpose(), &sa),
        rel_frobenius(&as_.transpose(), &as_),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

fn legendre_gram() -> Result<f64> {
    let t = 100_000;
    let u = uniform_inputs(t + 3, 51);
    let basis = enumerate_basis(2, 3)?;
    let ev = TargetEvaluator::for_basis(&u, &basis)?;
    let mut y = DMatrix::zeros(basis.len(), ev.len());
    for (l, idx) in basis.indices.iter().enumerate() {
        y.row_mut(l).copy_from_slice(&ev.row(idx));
    }
    let gram = &y * y.transpose() / ev.len() as f64;
    Ok((gram - DMatrix::identity(basis.len(), basis.len())).amax())
}

fn bound_basis_invariance() -> Result<f64> {
    let spec = noisy_linear(4, NoiseLocation::State)?;
    let ens = ensemble_run(&spec, &StreamSeeds::new(61), 2_000, 200, 30)?;
    let dec = estimate_moments(&ens)?;
    let g = gaussian(4, 4, 62) + DMatrix::identity(4, 4) * 3.0;
    let a = ipc_bound(&normalize_noise(&dec, DEFAULT_REL_TOL)?);
    let b = ipc_bound(&normalize_noise(&dec.transform(&g)?, DEFAULT_REL_TOL)?);
    Ok((a - b).abs())
}

fn small_bound_report() -> Result<noise::BoundReport> {
    let spec = fixtures::whitened_linear(4, 0.5, 71)?
        .with_noise(NoiseLocation::Output, diag(&[0.1, 0.5, 1.0, 2.0]))?;
    let mut exp = BoundExperiment::new(spec, enumerate_basis(2, 10)?, 20_000, 30, 72);
    exp.washout = 500;
    exp.bootstrap_reps = 50;
    noise::verify_bound(&exp)
}

/// How far the measured IPC exceeds the bound, minus the statistical slack
/// beyond the floor tolerance.
fn measured_within_bound() -> Result<f64> {
    let r = small_bound_report()?;
    Ok((r.ipc_measured - r.ipc_bound - (r.tol_stat - noise::TOL_STAT_FLOOR)).max(0.0))
}

fn two_path_agreement() -> Result<f64> {
    Ok(small_bound_report()?.two_path_rel_error())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes_at_nominal_tolerance() {
        let r = run_selftest(1.0).unwrap();
        for c in &r.checks {
            assert!(c.pass, "{} deviation {} tol {}", c.name, c.deviation, c.tolerance);
        }
    }

    #[test]
    fn zero_tolerance_fails() {
        assert!(!run_selftest(0.0).unwrap().pass());
    }
}
