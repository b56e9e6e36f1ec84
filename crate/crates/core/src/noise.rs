// SPDX-License-Identifier: Apache-2.0

//! Signal/noise decomposition of reservoir outputs and the noisy-IPC bound.
//!
//! Two averaging axes are used throughout: the noise average `⟨·⟩` over
//! realizations sharing one input sequence, and the input average, realized
//! as a time average over that (long, i.i.d.) sequence. With
//! `ΔX = X − ⟨X⟩`:
//!
//! ```text
//! Qη = avg_t ⟨X⟩⟨X⟩ᵀ        Qξ = avg_{t,r} ΔX ΔXᵀ
//! Qη = V D Vᵀ               Q̃ξ = (D^{1/2})⁺ Vᵀ Qξ V (D^{1/2})⁺
//! IPC ≤ Σ_k 1/(1 + σ̃_k²)    σ̃_k² = eigenvalues of Q̃ξ on the signal range
//! ```

use std::ops::Range;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use serde::Serialize;

use crate::basis::{BasisSet, TargetEvaluator};
use crate::capacity::{self, sample_std, AnalysisOptions, CapacityReport, ReportMetadata};
use crate::error::StageExt;
use crate::linalg::{self, PinvSqrt, DEFAULT_REL_TOL};
use crate::reservoir::{self, OutputEnsemble, ReservoirSpec};
use crate::seeds::{self, StreamSeeds};
use crate::{par, Error, Result};

/// Floor of the statistical tolerance used by [`verify_bound`].
pub const TOL_STAT_FLOOR: f64 = 0.05;

/// Fewer realizations than this gives a noisy `Qξ`; a warning is logged.
pub const RECOMMENDED_REALIZATIONS: usize = 30;

#[derive(Debug, Clone, Serialize)]
pub struct MomentDecomposition {
    pub q_eta: DMatrix<f64>,
    pub q_xi: DMatrix<f64>,
    pub second_moment: DMatrix<f64>,
    pub signal_rank: usize,
    pub len: usize,
    pub realizations: usize,
}

impl MomentDecomposition {
    pub fn from_parts(
        q_eta: DMatrix<f64>,
        q_xi: DMatrix<f64>,
        len: usize,
        realizations: usize,
    ) -> Result<Self> {
        if q_eta.shape() != q_xi.shape() || q_eta.nrows() != q_eta.ncols() {
            return Err(Error::mismatch(
                "q_xi",
                format!("{}x{}", q_eta.nrows(), q_eta.ncols()),
                format!("{}x{}", q_xi.nrows(), q_xi.ncols()),
            ));
        }
        let q_eta = linalg::symmetrize(&q_eta)?;
        let q_xi = linalg::symmetrize(&q_xi)?;
        let signal_rank = linalg::sym_eig(&q_eta, DEFAULT_REL_TOL)?.rank;
        Ok(Self {
            second_moment: &q_eta + &q_xi,
            q_eta,
            q_xi,
            signal_rank,
            len,
            realizations,
        })
    }

    pub fn dim(&self) -> usize {
        self.q_eta.nrows()
    }

    /// Moments of `G X` for an output map `G`: both parts transform by
    /// congruence.
    pub fn transform(&self, g: &DMatrix<f64>) -> Result<Self> {
        if g.ncols() != self.dim() {
            return Err(Error::mismatch("G", self.dim(), g.ncols()));
        }
        Self::from_parts(
            g * &self.q_eta * g.transpose(),
            g * &self.q_xi * g.transpose(),
            self.len,
            self.realizations,
        )
    }
}

fn outer_sum(m: &DMatrix<f64>) -> DMatrix<f64> {
    m * m.transpose()
}

/// `Qη`, `Qξ` from a materialized ensemble over all of its time steps.
pub fn estimate_moments(ensemble: &OutputEnsemble) -> Result<MomentDecomposition> {
    estimate_moments_window(ensemble, 0..ensemble.len())
}

pub fn estimate_moments_window(
    ensemble: &OutputEnsemble,
    window: Range<usize>,
) -> Result<MomentDecomposition> {
    let r = ensemble.realization_count();
    if window.is_empty() || window.end > ensemble.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window:?} outside 0..{}",
            ensemble.len()
        )));
    }
    let noisy = ensemble
        .residuals
        .iter()
        .any(|d| d.iter().any(|&v| v != 0.0))
        || (r == 1 && ensemble.noise_active);
    if r == 1 && noisy {
        return Err(Error::CannotSeparate);
    }
    if noisy && r < RECOMMENDED_REALIZATIONS {
        log::warn!("only {r} realizations; Qξ estimate will be noisy");
    }
    let t = window.len();
    let n = ensemble.output_dim();
    let q_eta = outer_sum(&ensemble.mean.columns(window.start, t).into_owned()) / t as f64;
    let mut q_xi = DMatrix::zeros(n, n);
    if noisy {
        for d in &ensemble.residuals {
            let dw = d.columns(window.start, t);
            q_xi += dw * dw.transpose();
        }
        q_xi /= (r * t) as f64;
    }
    MomentDecomposition::from_parts(q_eta, q_xi, t, r)
}

/// Noise- and time-averaged raw second moment `avg_{t,r} X Xᵀ`, computed
/// without the decomposition; used to check `Qη + Qξ` against it.
pub fn raw_second_moment(ensemble: &OutputEnsemble) -> DMatrix<f64> {
    let n = ensemble.output_dim();
    let mut m = DMatrix::zeros(n, n);
    for x in &ensemble.realizations {
        m += outer_sum(x);
    }
    m / (ensemble.realization_count() * ensemble.len()) as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct NormalizedNoise {
    /// `Q̃ξ`, n×n, zero outside the signal range.
    pub q_xi_tilde: DMatrix<f64>,
    /// `σ̃_k²` on the signal range, descending (length ñ).
    pub eigenvalues: DVector<f64>,
    /// Eigenvectors `V` of `Qη`.
    pub basis: DMatrix<f64>,
    pub inv_sqrt: DVector<f64>,
    pub signal_rank: usize,
    pub dim: usize,
}

impl NormalizedNoise {
    /// Whitening map `(D^{1/2})⁺ Vᵀ`, taking outputs to `X̃`.
    pub fn whitening(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.inv_sqrt) * self.basis.transpose()
    }

    /// The ñ×ñ block of `Q̃ξ` on the signal range.
    pub fn range_block(&self) -> DMatrix<f64> {
        self.q_xi_tilde
            .view((0, 0), (self.signal_rank, self.signal_rank))
            .into_owned()
    }
}

pub fn normalize_noise(dec: &MomentDecomposition, rel_tol: f64) -> Result<NormalizedNoise> {
    let spectral = linalg::sym_eig(&dec.q_eta, rel_tol)?;
    let PinvSqrt { inv_sqrt, .. } = linalg::pinv_sqrt(&spectral);
    let v = &spectral.eigenvectors;
    let s = DMatrix::from_diagonal(&inv_sqrt);
    let q_tilde = &s * v.transpose() * &dec.q_xi * v * &s;
    let q_tilde = (&q_tilde + q_tilde.transpose()) * 0.5;
    let rank = spectral.rank;
    let block = q_tilde.view((0, 0), (rank, rank)).into_owned();
    let eigenvalues = if rank > 0 {
        linalg::sym_eig(&block, rel_tol)?.eigenvalues
    } else {
        DVector::zeros(0)
    };
    Ok(NormalizedNoise {
        q_xi_tilde: q_tilde,
        eigenvalues,
        basis: spectral.eigenvectors,
        inv_sqrt,
        signal_rank: rank,
        dim: dec.dim(),
    })
}

/// `Σ_{k ≤ ñ} 1/(1 + σ̃_k²)`, the trace over the signal range.
pub fn ipc_bound(nn: &NormalizedNoise) -> f64 {
    nn.eigenvalues.iter().map(|s| 1.0 / (1.0 + s)).sum()
}

/// Same quantity via `Tr((I_ñ + Q̃ξ)⁻¹)` on the range block.
pub fn ipc_bound_trace(nn: &NormalizedNoise) -> Result<f64> {
    let k = nn.signal_rank;
    if k == 0 {
        return Ok(0.0);
    }
    let m = DMatrix::identity(k, k) + nn.range_block();
    let chol = m.cholesky().ok_or(Error::NoConvergence)?;
    Ok(chol.inverse().trace())
}

/// Full-trace convention: null directions of `Qη` each contribute 1.
pub fn ipc_bound_fullrank(nn: &NormalizedNoise) -> f64 {
    ipc_bound(nn) + (nn.dim - nn.signal_rank) as f64
}

/// `C_X̃Y = (D^{1/2})⁺ Vᵀ avg_t ⟨X⟩(t) Y(:,t)ᵀ`, n×D.
pub fn overlap_matrix(mean: &DMatrix<f64>, y: &DMatrix<f64>, nn: &NormalizedNoise) -> Result<DMatrix<f64>> {
    if mean.ncols() != y.ncols() {
        return Err(Error::mismatch("Y", format!("{} columns", mean.ncols()), y.ncols()));
    }
    if mean.nrows() != nn.dim {
        return Err(Error::mismatch("mean", nn.dim, mean.nrows()));
    }
    Ok(nn.whitening() * (mean * y.transpose()) / mean.ncols() as f64)
}

/// `D − Tr((I + Q̃ξ)⁻¹ C Cᵀ)` with `D` the number of targets.
pub fn two_path_error(nn: &NormalizedNoise, cct: &DMatrix<f64>, n_targets: usize) -> Result<f64> {
    let m = DMatrix::identity(nn.dim, nn.dim) + &nn.q_xi_tilde;
    let inv = m.cholesky().ok_or(Error::NoConvergence)?.inverse();
    Ok(n_targets as f64 - (inv * cct).trace())
}

/// Block sums produced by [`stream_moments`].
#[derive(Debug, Clone)]
pub struct StreamedMoments {
    pub decomposition: MomentDecomposition,
    /// `⟨X⟩` over the window, n×len.
    pub mean: DMatrix<f64>,
    eta_blocks: Vec<DMatrix<f64>>,
    xi_blocks: Vec<DMatrix<f64>>,
    block_lens: Vec<usize>,
}

fn realization_error(r: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Realization {
        index: r,
        source: Box::new(e),
    }
}

/// Realizations held in memory at once while accumulating.
fn group_size(n: usize, t: usize) -> usize {
    let bytes = (n * t * 8).max(1);
    (256 << 20) / bytes
}

/// Noise-ensemble moments without materializing the ensemble: realizations
/// are simulated twice (once for the mean, once for residuals) from their
/// seeds. Sums are combined in realization order, so results do not depend
/// on the thread schedule.
pub fn stream_moments(
    spec: &ReservoirSpec,
    inputs: &DMatrix<f64>,
    washout: usize,
    window: Range<usize>,
    seeds: &StreamSeeds,
    realizations: usize,
    n_blocks: usize,
) -> Result<StreamedMoments> {
    let n = spec.state_dim();
    let t_total = inputs.ncols().saturating_sub(washout);
    if window.is_empty() || window.end > t_total {
        return Err(Error::InvalidArgument(format!(
            "window {window:?} outside 0..{t_total}"
        )));
    }
    if realizations == 0 {
        return Err(Error::InvalidArgument("need R >= 1".into()));
    }
    let noisy = !spec.is_noiseless();
    if noisy && realizations == 1 {
        return Err(Error::CannotSeparate);
    }
    if noisy && realizations < RECOMMENDED_REALIZATIONS {
        log::warn!("only {realizations} realizations; Qξ estimate will be noisy");
    }
    let len = window.len();
    let blocks = {
        let nb = n_blocks.clamp(1, len);
        (0..nb).map(|b| (b * len / nb)..((b + 1) * len / nb)).collect::<Vec<_>>()
    };
    let start = window.start;
    let windowed = |r: usize| -> Result<DMatrix<f64>> {
        let mut x = DMatrix::zeros(n, len);
        reservoir::run_into(spec, inputs, washout, seeds.noise(r), |k, v| {
            if window.contains(&k) {
                x.set_column(k - start, v);
            }
        })
        .map_err(realization_error(r))?;
        Ok(x)
    };

    let group = group_size(n, len).clamp(1, 64);
    let mean = if noisy {
        let mut sum = DMatrix::zeros(n, len);
        for g0 in (0..realizations).step_by(group) {
            let g1 = (g0 + group).min(realizations);
            let runs = par::map_range(g1 - g0, |i| windowed(g0 + i));
            for x in runs {
                sum += x?;
            }
        }
        sum / realizations as f64
    } else {
        windowed(0)?
    };

    let eta_blocks: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|b| outer_sum(&mean.columns(b.start, b.len()).into_owned()))
        .collect();

    let mut xi_blocks = vec![DMatrix::zeros(n, n); blocks.len()];
    if noisy {
        let per_run = par::map_range(realizations, |r| -> Result<Vec<DMatrix<f64>>> {
            let mut acc = vec![DMatrix::zeros(n, n); blocks.len()];
            let mut resid = DVector::zeros(n);
            let mut b = 0;
            reservoir::run_into(spec, inputs, washout, seeds.noise(r), |k, v| {
                if !window.contains(&k) {
                    return;
                }
                let kk = k - start;
                while kk >= blocks[b].end {
                    b += 1;
                }
                resid.copy_from(v);
                resid -= mean.column(kk);
                acc[b].ger(1.0, &resid, &resid, 1.0);
            })
            .map_err(realization_error(r))?;
            Ok(acc)
        });
        for acc in per_run {
            for (dst, src) in xi_blocks.iter_mut().zip(acc?) {
                *dst += src;
            }
        }
    }

    let block_lens: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
    let decomposition = combine_blocks(
        &eta_blocks,
        &xi_blocks,
        &vec![1.0; blocks.len()],
        &block_lens,
        realizations,
    )?;
    Ok(StreamedMoments {
        decomposition,
        mean,
        eta_blocks,
        xi_blocks,
        block_lens,
    })
}

fn combine_blocks(
    eta_blocks: &[DMatrix<f64>],
    xi_blocks: &[DMatrix<f64>],
    weights: &[f64],
    lens: &[usize],
    realizations: usize,
) -> Result<MomentDecomposition> {
    let n = eta_blocks[0].nrows();
    let mut eta = DMatrix::zeros(n, n);
    let mut xi = DMatrix::zeros(n, n);
    let mut t = 0.0;
    for (((e, x), &w), &l) in eta_blocks.iter().zip(xi_blocks).zip(weights).zip(lens) {
        if w > 0.0 {
            eta += e * w;
            xi += x * w;
            t += w * l as f64;
        }
    }
    MomentDecomposition::from_parts(
        eta / t,
        xi / (t * realizations as f64),
        t as usize,
        realizations,
    )
}

impl StreamedMoments {
    /// Block-bootstrap standard error of the bound.
    pub fn bootstrap_bound_stderr(&self, reps: usize, seed: u64, rel_tol: f64) -> Result<f64> {
        let nb = self.eta_blocks.len();
        if nb < 2 || reps < 2 {
            return Ok(0.0);
        }
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
        let r = self.decomposition.realizations;
        let bounds = par::map_range(reps, |k| -> Result<f64> {
            let dec = combine_blocks(&self.eta_blocks, &self.xi_blocks, &draws[k], &self.block_lens, r)?;
            Ok(ipc_bound(&normalize_noise(&dec, rel_tol)?))
        });
        let bounds: Vec<f64> = bounds.into_iter().collect::<Result<_>>()?;
        Ok(sample_std(&bounds))
    }
}

/// Settings for one measured-IPC-versus-bound experiment.
#[derive(Debug, Clone)]
pub struct BoundExperiment {
    pub spec: ReservoirSpec,
    pub basis: BasisSet,
    /// Post-washout steps simulated.
    pub t: usize,
    pub washout: usize,
    pub realizations: usize,
    pub seeds: StreamSeeds,
    pub n_shuffles: usize,
    pub n_blocks: usize,
    pub bootstrap_reps: usize,
    pub rel_tol: f64,
}

impl BoundExperiment {
    pub fn new(spec: ReservoirSpec, basis: BasisSet, t: usize, realizations: usize, seed: u64) -> Self {
        Self {
            spec,
            basis,
            t,
            washout: reservoir::DEFAULT_WASHOUT,
            realizations,
            seeds: StreamSeeds::new(seed),
            n_shuffles: capacity::MIN_SHUFFLES,
            n_blocks: 50,
            bootstrap_reps: 200,
            rel_tol: DEFAULT_REL_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub ipc_measured: f64,
    pub ipc_bound: f64,
    /// Bound with null signal directions counted as 1 each.
    pub bound_fullrank: f64,
    /// Bound via `Tr((I + Q̃ξ)⁻¹)`, for cross-checking.
    pub bound_trace: f64,
    pub margin: f64,
    pub tol_stat: f64,
    pub pass: bool,
    pub stderr_measured: f64,
    pub stderr_bound: f64,
    pub threshold: f64,
    pub n: usize,
    pub signal_rank: usize,
    pub d: usize,
    pub t_effective: usize,
    pub realizations: usize,
    pub seed: u64,
    pub q_xi_tilde_eigenvalues: Vec<f64>,
    pub q_xi_tilde: Vec<Vec<f64>>,
    /// Eigenvalues of `C_X̃Y C_X̃Yᵀ`, descending.
    pub overlap_eigenvalues: Vec<f64>,
    /// `J(W★)` from the readout regression.
    pub j_star: f64,
    /// `D − Tr((I + Q̃ξ)⁻¹ C Cᵀ)` from the ensemble moments.
    pub j_two_path: f64,
    pub spec_digest: String,
    #[serde(skip)]
    pub capacity: CapacityReport,
    #[serde(skip)]
    pub moments: MomentDecomposition,
}

impl BoundReport {
    /// Relative disagreement of the two `J(W★)` routes.
    pub fn two_path_rel_error(&self) -> f64 {
        (self.j_star - self.j_two_path).abs() / self.j_star.abs().max(f64::MIN_POSITIVE)
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Measure IPC on realization 0 and compare it to the bound estimated from
/// the whole noise ensemble.
pub fn verify_bound(exp: &BoundExperiment) -> Result<BoundReport> {
    let spec = &exp.spec;
    if spec.input_dim() != 1 {
        return Err(Error::InvalidArgument(
            "IPC targets are defined for scalar inputs (d = 1)".into(),
        ));
    }
    if exp.t <= exp.basis.max_delay {
        return Err(Error::InsufficientHistory {
            required: exp.basis.max_delay + 1,
            available: exp.t,
        });
    }
    let inputs = reservoir::draw_inputs(1, exp.washout + exp.t, exp.seeds.inputs());
    let x0 = reservoir::run(spec, &inputs, exp.t, exp.washout, exp.seeds.noise(0)).stage("simulate")?;
    let u: Vec<f64> = inputs.columns(exp.washout, exp.t).iter().copied().collect();
    let evaluator = TargetEvaluator::for_basis(&u, &exp.basis).stage("basis")?;
    let window = evaluator.offset()..exp.t;

    let opts = AnalysisOptions {
        n_shuffles: exp.n_shuffles,
        n_blocks: exp.n_blocks,
        bootstrap_reps: exp.bootstrap_reps,
        seed: exp.seeds.analysis(),
        ..Default::default()
    };
    let metadata = ReportMetadata {
        r: exp.realizations,
        seeds: Some(exp.seeds.manifest(exp.realizations)),
        spec_digest: Some(spec.digest()),
        ..Default::default()
    };
    let analysis = capacity::analyze(
        x0.columns(window.start, window.len()),
        &evaluator,
        &exp.basis,
        &opts,
        metadata,
    )
    .stage("capacity")?;

    let streamed = stream_moments(
        spec,
        &inputs,
        exp.washout,
        window.clone(),
        &exp.seeds,
        exp.realizations,
        exp.n_blocks,
    )
    .stage("moments")?;
    let nn = normalize_noise(&streamed.decomposition, exp.rel_tol).stage("normalize")?;
    let bound = ipc_bound(&nn);
    let bound_trace = ipc_bound_trace(&nn).stage("bound")?;
    let stderr_bound = streamed
        .bootstrap_bound_stderr(exp.bootstrap_reps, seeds::mix(exp.seeds.analysis(), 2), exp.rel_tol)
        .stage("bootstrap")?;

    // Σ_ℓ c_ℓ c_ℓᵀ with c_ℓ = whitening · avg_t ⟨X⟩ y_ℓ.
    let whitening = nn.whitening();
    let len = window.len() as f64;
    let n = spec.state_dim();
    let columns = par::map_range_with(
        exp.basis.len(),
        || vec![0.0; evaluator.len()],
        |buf, l| {
            evaluator.fill_row(&exp.basis.indices[l], buf);
            &whitening * (&streamed.mean * DVectorView::from_slice(buf, buf.len())) / len
        },
    );
    let mut cct = DMatrix::zeros(n, n);
    for c in &columns {
        cct.ger(1.0, c, c, 1.0);
    }
    let j_two_path = two_path_error(&nn, &cct, exp.basis.len()).stage("overlap")?;
    let overlap_eigenvalues = linalg::sym_eig(&cct, exp.rel_tol)
        .map(|d| d.eigenvalues.iter().copied().collect())
        .unwrap_or_default();

    let measured = analysis.report.ipc_total;
    let tol_stat = TOL_STAT_FLOOR.max(3.0 * analysis.stderr);
    Ok(BoundReport {
        ipc_measured: measured,
        ipc_bound: bound,
        bound_fullrank: ipc_bound_fullrank(&nn),
        bound_trace,
        margin: bound - measured,
        tol_stat,
        pass: measured <= bound + tol_stat,
        stderr_measured: analysis.stderr,
        stderr_bound,
        threshold: analysis.report.threshold,
        n,
        signal_rank: nn.signal_rank,
        d: exp.basis.len(),
        t_effective: window.len(),
        realizations: exp.realizations,
        seed: exp.seeds.master,
        q_xi_tilde_eigenvalues: nn.eigenvalues.iter().copied().collect(),
        q_xi_tilde: matrix_rows(&nn.q_xi_tilde),
        overlap_eigenvalues,
        j_star: analysis.report.j_star,
        j_two_path,
        spec_digest: spec.digest(),
        capacity: analysis.report,
        moments: streamed.decomposition,
    })
}
