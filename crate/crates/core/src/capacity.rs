// SPDX-License-Identifier: Apache-2.0

//! Single-target capacities and the truncated IPC sum.
//!
//! With `M = ⟨X Xᵀ⟩_T` and `a_y = ⟨X y⟩_T`, the best linear readout for `y`
//! leaves a normalized error of `1 − a_yᵀ M⁺ a_y / ⟨y²⟩_T`, so the capacity is
//! `C_T[y] = a_yᵀ M⁺ a_y / ⟨y²⟩_T`. The Gram pseudo-inverse is factored once
//! and shared read-only across targets.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::Rng;
use serde::Serialize;

use crate::basis::{BasisIndex, BasisSet, TargetEvaluator};
use crate::linalg::{self, DEFAULT_REL_TOL};
use crate::seeds::{self, SeedManifest};
use crate::{par, Error, Result};

/// Numerical slack allowed around `[0, 1]` for raw capacities.
pub const CAPACITY_SLACK: f64 = 1e-9;

/// Null capacities are summarized as `mean + NULL_SIGMAS · stddev`.
pub const NULL_SIGMAS: f64 = 4.0;

pub const MIN_SHUFFLES: usize = 20;

fn split_blocks(len: usize, n_blocks: usize) -> Vec<Range<usize>> {
    let n_blocks = n_blocks.clamp(1, len.max(1));
    (0..n_blocks)
        .map(|b| (b * len / n_blocks)..((b + 1) * len / n_blocks))
        .collect()
}

/// Time-averaged Gram matrix of a set of outputs, its pseudo-inverse, and
/// optional per-block sums for resampling.
#[derive(Debug, Clone)]
pub struct Readout<'a> {
    x: DMatrixView<'a, f64>,
    gram: DMatrix<f64>,
    gram_pinv: DMatrix<f64>,
    blocks: Vec<Range<usize>>,
    gram_blocks: Vec<DMatrix<f64>>,
}

/// Per-block sums `Σ_t x(t) y(t)` (columns) and `Σ_t y(t)²` for one target.
#[derive(Debug, Clone)]
pub struct TargetMoments {
    pub xy: DMatrix<f64>,
    pub yy: DVector<f64>,
}

impl TargetMoments {
    fn totals(&self) -> (DVector<f64>, f64) {
        (self.xy.column_sum(), self.yy.sum())
    }
}

impl<'a> Readout<'a> {
    pub fn new(x: DMatrixView<'a, f64>) -> Result<Self> {
        Self::with_blocks(x, 1)
    }

    pub fn with_blocks(x: DMatrixView<'a, f64>, n_blocks: usize) -> Result<Self> {
        let (n, t) = x.shape();
        if t == 0 || n == 0 {
            return Err(Error::InvalidArgument(
                "readout needs at least one output and one time step".into(),
            ));
        }
        if t < n {
            log::warn!("T = {t} is smaller than the output count n = {n}; capacities will be inflated");
        }
        let blocks = split_blocks(t, n_blocks);
        let gram_blocks: Vec<DMatrix<f64>> = blocks
            .iter()
            .map(|r| {
                let xb = x.columns(r.start, r.len());
                xb * xb.transpose()
            })
            .collect();
        let mut gram = DMatrix::zeros(n, n);
        for g in &gram_blocks {
            gram += g;
        }
        gram /= t as f64;
        let gram_pinv = linalg::pinv(&gram, DEFAULT_REL_TOL)?;
        Ok(Self {
            x,
            gram,
            gram_pinv,
            blocks,
            gram_blocks,
        })
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn outputs(&self) -> DMatrixView<'a, f64> {
        self.x
    }

    /// `M = ⟨X Xᵀ⟩_T`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_pinv(&self) -> &DMatrix<f64> {
        &self.gram_pinv
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_len(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.len() {
            return Err(Error::mismatch("y", self.len(), y.len()));
        }
        Ok(())
    }

    pub fn moments(&self, y: &[f64]) -> Result<TargetMoments> {
        self.check_len(y)?;
        let mut xy = DMatrix::zeros(self.dim(), self.blocks.len());
        let mut yy = DVector::zeros(self.blocks.len());
        for (b, r) in self.blocks.iter().enumerate() {
            let yb = DVectorView::from_slice(&y[r.clone()], r.len());
            xy.set_column(b, &(self.x.columns(r.start, r.len()) * yb));
            yy[b] = yb.norm_squared();
        }
        Ok(TargetMoments { xy, yy })
    }

    pub fn capacity_from(&self, m: &TargetMoments) -> Result<f64> {
        let (a, yy) = m.totals();
        quadratic_capacity(&self.gram_pinv, &a, yy, self.len() as f64)
    }

    /// Raw capacity `C_T[y]`.
    pub fn capacity(&self, y: &[f64]) -> Result<f64> {
        self.capacity_from(&self.moments(y)?)
    }

    /// Optimal readout weights `w★ = M⁺ ⟨X y⟩_T` for one target.
    pub fn weights(&self, y: &[f64]) -> Result<DVector<f64>> {
        self.check_len(y)?;
        let a = self.x * DVectorView::from_slice(y, y.len()) / self.len() as f64;
        Ok(&self.gram_pinv * a)
    }
}

/// `aᵀ M⁺ a / yy` with `a`, `yy` given as sums over `t` time steps.
fn quadratic_capacity(gram_pinv: &DMatrix<f64>, a_sum: &DVector<f64>, yy_sum: f64, t: f64) -> Result<f64> {
    if yy_sum.is_nan() || yy_sum <= 0.0 {
        return Err(Error::DegenerateTarget);
    }
    let a = a_sum / t;
    Ok(a.dot(&(gram_pinv * &a)) / (yy_sum / t))
}

/// `C_T[y]` for outputs `X` (n×T) and target `y` (length T).
pub fn capacity(x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    Readout::new(x.as_view())?.capacity(y)
}

/// `W★ = ⟨X Xᵀ⟩⁺ ⟨X Yᵀ⟩`, n×D.
pub fn optimal_weights(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::mismatch("Y", format!("{} columns", x.ncols()), y.ncols()));
    }
    let t = x.ncols() as f64;
    let gram = x * x.transpose() / t;
    let cross = x * y.transpose() / t;
    Ok(linalg::pinv(&gram, DEFAULT_REL_TOL)? * cross)
}

/// `J = (1/T) Σ_t ‖Y(:,t) − Wᵀ X(:,t)‖²`.
pub fn reconstruction_error(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::mismatch("Y", format!("{} columns", x.ncols()), y.ncols()));
    }
    if w.shape() != (x.nrows(), y.nrows()) {
        return Err(Error::mismatch(
            "W",
            format!("{}x{}", x.nrows(), y.nrows()),
            format!("{}x{}", w.nrows(), w.ncols()),
        ));
    }
    let resid = y - w.transpose() * x;
    Ok(resid.norm_squared() / x.ncols() as f64)
}

fn rotate_shift(t: usize, rng: &mut impl Rng) -> usize {
    if t < 10 {
        return rng.random_range(1..t.max(2));
    }
    rng.random_range(t / 10..=9 * t / 10)
}

/// Capacities of cyclically shifted copies of each target. Shifting keeps
/// the target's own statistics but destroys its alignment with the inputs
/// that drove `X`.
pub fn null_capacities(
    readout: &Readout<'_>,
    targets: &[Vec<f64>],
    n_shuffles: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_shuffles < MIN_SHUFFLES {
        return Err(Error::InvalidArgument(format!(
            "n_shuffles must be >= {MIN_SHUFFLES}, got {n_shuffles}"
        )));
    }
    let t = readout.len();
    let mut rng = seeds::rng(seed);
    let jobs: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .flat_map(|(i, _)| (0..n_shuffles).map(move |_| i))
        .map(|i| (i, rotate_shift(t, &mut rng)))
        .collect();
    par::map_range_with(
        jobs.len(),
        || vec![0.0; t],
        |buf, j| {
            let (i, shift) = jobs[j];
            let y = &targets[i];
            buf[..t - shift].copy_from_slice(&y[shift..]);
            buf[t - shift..].copy_from_slice(&y[..shift]);
            readout.capacity(buf)
        },
    )
    .into_iter()
    .collect()
}

/// `ε_C = mean + 4·stddev` of the null capacities.
pub fn threshold_from_nulls(nulls: &[f64]) -> f64 {
    let k = nulls.len() as f64;
    let mean = nulls.iter().sum::<f64>() / k;
    let var = if nulls.len() > 1 {
        nulls.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    mean + NULL_SIGMAS * var.sqrt()
}

/// Finite-sample significance threshold for capacities measured on `X`.
/// Each row of `targets` (length T) is a representative target.
pub fn significance_threshold(
    x: &DMatrix<f64>,
    targets: &[Vec<f64>],
    n_shuffles: usize,
    seed: u64,
) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no representative targets".into()));
    }
    let readout = Readout::new(x.as_view())?;
    Ok(threshold_from_nulls(&null_capacities(&readout, targets, n_shuffles, seed)?))
}

/// Up to `k` indices spread evenly over the basis order.
pub fn representative_targets(basis: &BasisSet, k: usize) -> Vec<BasisIndex> {
    let d = basis.len();
    let k = k.min(d);
    (0..k).map(|i| basis.indices[i * d / k].clone()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetCapacity {
    pub index: BasisIndex,
    pub raw: f64,
    pub thresholded: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ReportMetadata {
    /// Effective number of time steps used in the time averages.
    pub t: usize,
    pub d: usize,
    pub n: usize,
    pub r: usize,
    pub max_degree: u32,
    pub max_delay: usize,
    pub seeds: Option<SeedManifest>,
    pub spec_digest: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CapacityReport {
    pub per_target: Vec<TargetCapacity>,
    pub ipc_total: f64,
    pub threshold: f64,
    /// Sum of raw (unthresholded) capacities.
    pub raw_total: f64,
    /// `J(W★) = Σ_ℓ ⟨y_ℓ²⟩_T (1 − C_T[y_ℓ])`.
    pub j_star: f64,
    pub metadata: ReportMetadata,
}

pub fn threshold_capacity(raw: f64, threshold: f64) -> f64 {
    if raw < threshold {
        0.0
    } else {
        raw.clamp(0.0, 1.0)
    }
}

impl CapacityReport {
    fn from_parts(
        basis: &BasisSet,
        raws: &[f64],
        yy: &[f64],
        threshold: f64,
        metadata: ReportMetadata,
    ) -> Self {
        let per_target: Vec<TargetCapacity> = basis
            .indices
            .iter()
            .zip(raws)
            .map(|(index, &raw)| TargetCapacity {
                index: index.clone(),
                raw,
                thresholded: threshold_capacity(raw, threshold),
            })
            .collect();
        let ipc_total = per_target.iter().map(|c| c.thresholded).sum();
        let raw_total = raws.iter().sum();
        let j_star = raws.iter().zip(yy).map(|(c, y)| y * (1.0 - c)).sum();
        Self {
            per_target,
            ipc_total,
            threshold,
            raw_total,
            j_star,
            metadata,
        }
    }

    /// One row per target: `index,raw,thresholded`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(["index", "raw", "thresholded"]).map_err(io)?;
        for c in &self.per_target {
            w.write_record([
                c.index.to_string(),
                format!("{:.17e}", c.raw),
                format!("{:.17e}", c.thresholded),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        crate::cli::write_atomic(path, &bytes)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "ipc_total": self.ipc_total,
            "raw_total": self.raw_total,
            "threshold": self.threshold,
            "j_star": self.j_star,
            "metadata": self.metadata,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary_json())
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        crate::cli::write_atomic(path, text.as_bytes())
    }
}

/// Moments of every basis target against a shared readout.
#[derive(Debug, Clone)]
pub struct MeasuredTargets {
    pub moments: Vec<TargetMoments>,
    pub raw: Vec<f64>,
}

impl MeasuredTargets {
    pub fn yy_means(&self, t: usize) -> Vec<f64> {
        self.moments.iter().map(|m| m.yy.sum() / t as f64).collect()
    }
}

pub fn measure_targets(
    readout: &Readout<'_>,
    evaluator: &TargetEvaluator,
    basis: &BasisSet,
) -> Result<MeasuredTargets> {
    if evaluator.len() != readout.len() {
        return Err(Error::mismatch("targets", readout.len(), evaluator.len()));
    }
    let results = par::map_range_with(
        basis.len(),
        || vec![0.0; evaluator.len()],
        |buf, l| -> Result<(TargetMoments, f64)> {
            evaluator.fill_row(&basis.indices[l], buf);
            let m = readout.moments(buf)?;
            let c = readout.capacity_from(&m)?;
            Ok((m, c))
        },
    );
    let mut moments = Vec::with_capacity(basis.len());
    let mut raw = Vec::with_capacity(basis.len());
    for r in results {
        let (m, c) = r?;
        moments.push(m);
        raw.push(c);
    }
    Ok(MeasuredTargets { moments, raw })
}

/// IPC of outputs `X` (n×T) driven by the scalar input sequence `inputs`
/// (length T, same time index). The first `basis.max_delay` steps lack
/// target history and are dropped from both.
pub fn ipc_estimate(
    x: &DMatrix<f64>,
    inputs: &[f64],
    basis: &BasisSet,
    threshold: f64,
) -> Result<CapacityReport> {
    if x.ncols() != inputs.len() {
        return Err(Error::mismatch("inputs", x.ncols(), inputs.len()));
    }
    let evaluator = TargetEvaluator::for_basis(inputs, basis)?;
    let readout = Readout::new(x.columns(evaluator.offset(), evaluator.len()))?;
    let measured = measure_targets(&readout, &evaluator, basis)?;
    let t = readout.len();
    Ok(report_from(basis, &measured, threshold, ReportMetadata {
        t,
        d: basis.len(),
        n: x.nrows(),
        r: 1,
        max_degree: basis.max_degree,
        max_delay: basis.max_delay,
        ..Default::default()
    }))
}

pub fn report_from(
    basis: &BasisSet,
    measured: &MeasuredTargets,
    threshold: f64,
    metadata: ReportMetadata,
) -> CapacityReport {
    let yy = measured.yy_means(metadata.t);
    CapacityReport::from_parts(basis, &measured.raw, &yy, threshold, metadata)
}

/// Block-bootstrap standard error of the thresholded IPC total.
pub fn bootstrap_ipc_stderr(
    readout: &Readout<'_>,
    measured: &MeasuredTargets,
    threshold: f64,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let nb = readout.n_blocks();
    if nb < 2 || reps < 2 {
        return Ok(0.0);
    }
    let lens: Vec<f64> = readout.blocks.iter().map(|r| r.len() as f64).collect();
    let mut rng = seeds::rng(seed);
    let draws: Vec<Vec<f64>> = (0..reps)
        .map(|_| {
            let mut c = vec![0.0; nb];
            for _ in 0..nb {
                c[rng.random_range(0..nb)] += 1.0;
            }
            c
        })
        .collect();
    let totals = par::map_range(reps, |k| -> Result<f64> {
        let counts = DVector::from_column_slice(&draws[k]);
        let t: f64 = counts.iter().zip(&lens).map(|(c, l)| c * l).sum();
        let mut gram = DMatrix::zeros(readout.dim(), readout.dim());
        for (g, &c) in readout.gram_blocks.iter().zip(counts.iter()) {
            if c > 0.0 {
                gram += g * c;
            }
        }
        gram /= t;
        let gram_pinv = linalg::pinv(&gram, DEFAULT_REL_TOL)?;
        let mut total = 0.0;
        for m in &measured.moments {
            let a = &m.xy * &counts;
            let yy = m.yy.dot(&counts);
            let raw = quadratic_capacity(&gram_pinv, &a, yy, t).unwrap_or(0.0);
            total += threshold_capacity(raw, threshold);
        }
        Ok(total)
    });
    let totals: Vec<f64> = totals.into_iter().collect::<Result<_>>()?;
    Ok(sample_std(&totals))
}

pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
}

/// Capacity-side results of one analysis pass.
#[derive(Debug, Clone)]
pub struct CapacityAnalysis {
    pub report: CapacityReport,
    pub stderr: f64,
    pub null_capacities: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct AnalysisOptions {
    pub n_shuffles: usize,
    pub representatives: usize,
    pub n_blocks: usize,
    pub bootstrap_reps: usize,
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            n_shuffles: MIN_SHUFFLES,
            representatives: 8,
            n_blocks: 50,
            bootstrap_reps: 200,
            seed: 0,
        }
    }
}

/// Threshold, capacities and bootstrap error in one pass over the targets.
/// `x` must already be restricted to the evaluator's window.
pub fn analyze(
    x: DMatrixView<'_, f64>,
    evaluator: &TargetEvaluator,
    basis: &BasisSet,
    opts: &AnalysisOptions,
    mut metadata: ReportMetadata,
) -> Result<CapacityAnalysis> {
    let readout = Readout::with_blocks(x, opts.n_blocks)?;
    let measured = measure_targets(&readout, evaluator, basis)?;
    let reps: Vec<Vec<f64>> = representative_targets(basis, opts.representatives)
        .iter()
        .map(|i| evaluator.row(i))
        .collect();
    let null_capacities = null_capacities(&readout, &reps, opts.n_shuffles, opts.seed)?;
    let threshold = threshold_from_nulls(&null_capacities);
    metadata.t = readout.len();
    metadata.d = basis.len();
    metadata.n = readout.dim();
    metadata.max_degree = basis.max_degree;
    metadata.max_delay = basis.max_delay;
    let report = report_from(basis, &measured, threshold, metadata);
    let stderr = bootstrap_ipc_stderr(
        &readout,
        &measured,
        threshold,
        opts.bootstrap_reps,
        seeds::mix(opts.seed, 1),
    )?;
    Ok(CapacityAnalysis {
        report,
        stderr,
        null_capacities,
    })
}
