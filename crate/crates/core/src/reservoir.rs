// SPDX-License-Identifier: Apache-2.0

//! Driven stochastic reservoirs.
//!
//! Two dynamics are supported, both started from the zero state:
//!
//! * `Linear`:    `s(t) = A s(t−1) + B U(t) + ε(t)`
//! * `EchoState`: `s(t) = tanh(A s(t−1) + B U(t) + ε(t))`
//!
//! The readout is the state itself, `x(t) = s(t) + e(t)`. State noise `ε`
//! and output noise `e` are Gaussian with covariance `Σ`; which one is active
//! is selected by [`NoiseLocation`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::{self, DEFAULT_REL_TOL};
use crate::seeds::{self, SeedManifest, StreamSeeds};
use crate::{par, Error, Result};

/// States at or above this magnitude overflow once squared into second
/// moments, so they are reported as divergence.
pub const OVERFLOW_LIMIT: f64 = 1.0e154;

pub const DEFAULT_WASHOUT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservoirKind {
    Linear,
    EchoState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLocation {
    #[default]
    None,
    State,
    Output,
}

#[derive(Debug, Clone)]
pub struct ReservoirSpec {
    pub kind: ReservoirKind,
    /// `A`, n×n.
    pub recurrent: DMatrix<f64>,
    /// `B`, n×d, input scaling already applied.
    pub input: DMatrix<f64>,
    /// Measured spectral radius of `A`.
    pub spectral_radius: f64,
    pub input_scale: f64,
    pub noise_location: NoiseLocation,
    /// `Σ`, n×n symmetric PSD.
    pub noise_covariance: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
    noise_active: bool,
}

impl ReservoirSpec {
    /// Noiseless reservoir from explicit matrices.
    pub fn from_matrices(
        kind: ReservoirKind,
        recurrent: DMatrix<f64>,
        input: DMatrix<f64>,
    ) -> Result<Self> {
        let n = recurrent.nrows();
        if n == 0 || recurrent.ncols() != n {
            return Err(Error::mismatch(
                "recurrent_matrix",
                "non-empty square matrix",
                format!("{}x{}", recurrent.nrows(), recurrent.ncols()),
            ));
        }
        if input.nrows() != n || input.ncols() == 0 {
            return Err(Error::mismatch(
                "input_matrix",
                format!("{n}xd with d >= 1"),
                format!("{}x{}", input.nrows(), input.ncols()),
            ));
        }
        if recurrent.iter().chain(input.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "reservoir matrices contain non-finite entries".into(),
            ));
        }
        Ok(Self {
            kind,
            spectral_radius: linalg::spectral_radius(&recurrent),
            input_scale: 1.0,
            noise_location: NoiseLocation::None,
            noise_covariance: DMatrix::zeros(n, n),
            noise_factor: DMatrix::zeros(n, n),
            noise_active: false,
            recurrent,
            input,
        })
    }

    /// Random reservoir: `A` dense standard Gaussian rescaled to spectral
    /// radius `rho`; `B` i.i.d. uniform on `[−1, 1]` times `input_scale`.
    pub fn generate(
        kind: ReservoirKind,
        state_dim: usize,
        input_dim: usize,
        rho: f64,
        input_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if state_dim == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument(
                "state_dim and input_dim must be at least 1".into(),
            ));
        }
        if !(rho.is_finite() && rho >= 0.0) || !input_scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "spectral radius must be finite and nonnegative, got {rho}"
            )));
        }
        let mut rng = seeds::rng(seed);
        let mut a = DMatrix::from_fn(state_dim, state_dim, |_, _| rng.sample(StandardNormal));
        let current = linalg::spectral_radius(&a);
        if current > 0.0 {
            a *= rho / current;
        } else {
            a.fill(0.0);
        }
        let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let b = DMatrix::from_fn(state_dim, input_dim, |_, _| rng.sample(unif) * input_scale);
        let mut spec = Self::from_matrices(kind, a, b)?;
        spec.input_scale = input_scale;
        Ok(spec)
    }

    /// Attach Gaussian noise with covariance `sigma`. Eigenvalues down to
    /// `−1e-12·λ_max` are clamped to zero.
    pub fn with_noise(mut self, location: NoiseLocation, sigma: DMatrix<f64>) -> Result<Self> {
        let n = self.state_dim();
        if sigma.shape() != (n, n) {
            return Err(Error::mismatch(
                "noise_covariance",
                format!("{n}x{n}"),
                format!("{}x{}", sigma.nrows(), sigma.ncols()),
            ));
        }
        let dec = linalg::sym_eig(&sigma, DEFAULT_REL_TOL)?;
        let clamped = dec.reconstruct();
        self.noise_factor = dec.map_spectrum(|_, l| l.sqrt());
        self.noise_active = location != NoiseLocation::None && dec.eigenvalues.iter().any(|&l| l > 0.0);
        self.noise_covariance = if location == NoiseLocation::None {
            DMatrix::zeros(n, n)
        } else {
            clamped
        };
        self.noise_location = location;
        if !self.noise_active {
            self.noise_factor.fill(0.0);
        }
        Ok(self)
    }

    /// Diagonal shortcut: `Σ = diag(variances)`.
    pub fn with_noise_variances(self, location: NoiseLocation, variances: &[f64]) -> Result<Self> {
        if variances.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "noise variances must be finite and nonnegative".into(),
            ));
        }
        let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
        self.with_noise(location, sigma)
    }

    pub fn state_dim(&self) -> usize {
        self.recurrent.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input.ncols()
    }

    /// True when no realization can differ from another.
    pub fn is_noiseless(&self) -> bool {
        !self.noise_active
    }

    pub fn without_noise(&self) -> Self {
        let n = self.state_dim();
        let mut spec = self.clone();
        spec.noise_location = NoiseLocation::None;
        spec.noise_covariance = DMatrix::zeros(n, n);
        spec.noise_factor = DMatrix::zeros(n, n);
        spec.noise_active = false;
        spec
    }

    /// One draw from `N(0, Σ)`.
    pub fn noise_draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let n = self.state_dim();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.noise_factor * z
    }

    fn noise_into(&self, rng: &mut ChaCha8Rng, z: &mut DVector<f64>, out: &mut DVector<f64>) {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        self.noise_factor.mul_to(z, out);
    }

    /// SHA-256 over kind, matrices and noise covariance.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}|{:?}|", self.kind, self.noise_location).as_bytes());
        for m in [&self.recurrent, &self.input, &self.noise_covariance] {
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_state(&self, operand: &'static str, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.state_dim() {
            return Err(Error::mismatch(operand, self.state_dim(), v.len()));
        }
        Ok(())
    }
}

/// Allocation-free update: `next = F(state, input) (+ noise inside F)`.
fn advance(
    spec: &ReservoirSpec,
    state: &DVector<f64>,
    input: &[f64],
    noise: Option<&DVector<f64>>,
    next: &mut DVector<f64>,
) {
    spec.recurrent.mul_to(state, next);
    for (j, &u) in input.iter().enumerate() {
        next.axpy(u, &spec.input.column(j), 1.0);
    }
    if let Some(eps) = noise {
        *next += eps;
    }
    if spec.kind == ReservoirKind::EchoState {
        next.apply(|v| *v = v.tanh());
    }
}

/// One reservoir update with an explicit noise draw added inside the
/// nonlinearity (zero vector for no noise).
pub fn step(
    state: &DVector<f64>,
    input: &DVector<f64>,
    spec: &ReservoirSpec,
    noise_draw: &DVector<f64>,
) -> Result<DVector<f64>> {
    spec.check_state("state", state)?;
    spec.check_state("noise_draw", noise_draw)?;
    if input.len() != spec.input_dim() {
        return Err(Error::mismatch("input", spec.input_dim(), input.len()));
    }
    let mut next = DVector::zeros(spec.state_dim());
    advance(spec, state, input.as_slice(), Some(noise_draw), &mut next);
    Ok(next)
}

/// i.i.d. uniform `[−1, 1]` inputs, `d × len`.
pub fn draw_inputs(input_dim: usize, len: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeds::rng(seed);
    let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    DMatrix::from_fn(input_dim, len, |_, _| rng.sample(unif))
}

/// Single realization. `inputs` holds `washout + t` columns; the returned
/// `n × t` matrix covers the post-washout steps only.
pub fn run(
    spec: &ReservoirSpec,
    inputs: &DMatrix<f64>,
    t: usize,
    washout: usize,
    noise_seed: u64,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(spec.state_dim(), t);
    run_into(spec, inputs, washout, noise_seed, |k, x| out.set_column(k, x))?;
    Ok(out)
}

/// Streaming form of [`run`]: `sink(k, x(k))` is called for each of the `t`
/// post-washout outputs.
pub fn run_into(
    spec: &ReservoirSpec,
    inputs: &DMatrix<f64>,
    washout: usize,
    noise_seed: u64,
    mut sink: impl FnMut(usize, &DVector<f64>),
) -> Result<()> {
    if inputs.nrows() != spec.input_dim() {
        return Err(Error::mismatch("inputs", spec.input_dim(), inputs.nrows()));
    }
    let total = inputs.ncols();
    if total <= washout {
        return Err(Error::InvalidArgument(format!(
            "need T >= 1 post-washout steps, got {} inputs for washout {washout}",
            total
        )));
    }
    let n = spec.state_dim();
    let mut rng = seeds::rng(noise_seed);
    let mut state = DVector::zeros(n);
    let mut next = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    let mut eps = DVector::zeros(n);
    let state_noise = spec.noise_active && spec.noise_location == NoiseLocation::State;
    let output_noise = spec.noise_active && spec.noise_location == NoiseLocation::Output;

    for step in 0..total {
        if state_noise {
            spec.noise_into(&mut rng, &mut z, &mut eps);
        }
        advance(
            spec,
            &state,
            inputs.column(step).as_slice(),
            state_noise.then_some(&eps),
            &mut next,
        );
        if !next.iter().all(|v| v.abs() < OVERFLOW_LIMIT) {
            return Err(Error::NonFinite { step: step + 1 });
        }
        std::mem::swap(&mut state, &mut next);
        if step >= washout {
            if output_noise {
                spec.noise_into(&mut rng, &mut z, &mut eps);
                eps += &state;
                sink(step - washout, &eps);
            } else {
                sink(step - washout, &state);
            }
        }
    }
    Ok(())
}

/// `R` noise realizations for one shared input sequence.
#[derive(Debug, Clone)]
pub struct OutputEnsemble {
    /// `d × T`, post-washout.
    pub inputs: DMatrix<f64>,
    pub realizations: Vec<DMatrix<f64>>,
    pub mean: DMatrix<f64>,
    pub residuals: Vec<DMatrix<f64>>,
    pub washout: usize,
    pub seed_manifest: SeedManifest,
    /// Whether the generating reservoir injects noise.
    pub noise_active: bool,
}

impl OutputEnsemble {
    pub fn output_dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn len(&self) -> usize {
        self.mean.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.ncols() == 0
    }

    pub fn realization_count(&self) -> usize {
        self.realizations.len()
    }

    /// Ensemble of `G X_r` for an `m × n` output map `G`. Used for whitening,
    /// basis changes and duplicated outputs.
    pub fn transform_outputs(&self, g: &DMatrix<f64>) -> Result<Self> {
        if g.ncols() != self.output_dim() {
            return Err(Error::mismatch("G", self.output_dim(), g.ncols()));
        }
        let realizations: Vec<_> = self.realizations.iter().map(|x| g * x).collect();
        let mean = g * &self.mean;
        let residuals = self.residuals.iter().map(|d| g * d).collect();
        Ok(Self {
            inputs: self.inputs.clone(),
            realizations,
            mean,
            residuals,
            washout: self.washout,
            seed_manifest: self.seed_manifest.clone(),
            noise_active: self.noise_active,
        })
    }
}

pub(crate) fn mean_of(realizations: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut mean = realizations[0].clone();
    for x in &realizations[1..] {
        mean += x;
    }
    mean / realizations.len() as f64
}

pub fn ensemble_run(
    spec: &ReservoirSpec,
    seeds: &StreamSeeds,
    t: usize,
    washout: usize,
    realizations: usize,
) -> Result<OutputEnsemble> {
    if realizations == 0 || t == 0 {
        return Err(Error::InvalidArgument(
            "ensemble needs R >= 1 and T >= 1".into(),
        ));
    }
    let inputs = draw_inputs(spec.input_dim(), washout + t, seeds.inputs());
    let runs = par::map_range(realizations, |r| {
        run(spec, &inputs, t, washout, seeds.noise(r)).map_err(|e| Error::Realization {
            index: r,
            source: Box::new(e),
        })
    });
    let realizations: Vec<DMatrix<f64>> = runs.into_iter().collect::<Result<_>>()?;
    let mean = if spec.is_noiseless() {
        realizations[0].clone()
    } else {
        mean_of(&realizations)
    };
    let residuals = realizations.iter().map(|x| x - &mean).collect();
    Ok(OutputEnsemble {
        inputs: inputs.columns(washout, t).into_owned(),
        seed_manifest: seeds.manifest(realizations.len()),
        realizations,
        mean,
        residuals,
        washout,
        noise_active: !spec.is_noiseless(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FadingMemoryProbe {
    pub initial: f64,
    /// `‖s_a(t) − s_b(t)‖₂` for `t = 1..T`.
    pub divergence: Vec<f64>,
    pub pass: bool,
}

/// Drive two copies of the noiseless reservoir from different initial states
/// with the same input sequence and record how fast they converge.
pub fn fading_memory_probe(
    spec: &ReservoirSpec,
    s0_a: &DVector<f64>,
    s0_b: &DVector<f64>,
    t: usize,
    input_seed: u64,
) -> Result<FadingMemoryProbe> {
    spec.check_state("s0_a", s0_a)?;
    spec.check_state("s0_b", s0_b)?;
    let inputs = draw_inputs(spec.input_dim(), t, input_seed);
    let (mut a, mut b) = (s0_a.clone(), s0_b.clone());
    let mut next = DVector::zeros(spec.state_dim());
    let initial = (s0_a - s0_b).norm();
    let mut divergence = Vec::with_capacity(t);
    for k in 0..t {
        let u = inputs.column(k);
        advance(spec, &a, u.as_slice(), None, &mut next);
        std::mem::swap(&mut a, &mut next);
        advance(spec, &b, u.as_slice(), None, &mut next);
        std::mem::swap(&mut b, &mut next);
        if !(a.iter().chain(b.iter()).all(|v| v.is_finite())) {
            return Err(Error::NonFinite { step: k + 1 });
        }
        divergence.push((&a - &b).norm());
    }
    let last = divergence.last().copied().unwrap_or(initial);
    let pass = initial == 0.0 || last < 1e-8 * initial;
    Ok(FadingMemoryProbe {
        initial,
        divergence,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar(kind: ReservoirKind, a: f64, b: f64) -> ReservoirSpec {
        ReservoirSpec::from_matrices(
            kind,
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
        )
        .unwrap()
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn linear_step_erases_state() {
        let spec = ReservoirSpec::from_matrices(
            ReservoirKind::Linear,
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let next = step(&dv(&[3.2]), &dv(&[0.7]), &spec, &dv(&[0.0])).unwrap();
        assert_eq!(next.as_slice(), &[0.7]);
    }

    #[test]
    fn echo_state_zero_weights() {
        let spec = ReservoirSpec::from_matrices(
            ReservoirKind::EchoState,
            DMatrix::zeros(3, 3),
            DMatrix::zeros(3, 2),
        )
        .unwrap();
        let next = step(&dv(&[1.0, -2.0, 0.5]), &dv(&[0.3, 0.9]), &spec, &DVector::zeros(3)).unwrap();
        assert_eq!(next, DVector::zeros(3));
    }

    #[test]
    fn linear_hand_recursion() {
        let spec = scalar(ReservoirKind::Linear, 0.5, 1.0);
        let s1 = step(&dv(&[0.0]), &dv(&[1.0]), &spec, &dv(&[0.0])).unwrap();
        let s2 = step(&s1, &dv(&[-1.0]), &spec, &dv(&[0.0])).unwrap();
        assert_eq!(s1[0], 1.0);
        assert_eq!(s2[0], -0.5);
    }

    #[test]
    fn step_dimension_errors_name_operand() {
        let spec = scalar(ReservoirKind::Linear, 0.5, 1.0);
        let err = step(&dv(&[0.0, 1.0]), &dv(&[1.0]), &spec, &dv(&[0.0])).unwrap_err();
        assert!(err.to_string().contains("`state`"), "{err}");
        let err = step(&dv(&[0.0]), &dv(&[1.0, 2.0]), &spec, &dv(&[0.0])).unwrap_err();
        assert!(err.to_string().contains("`input`"), "{err}");
        let err = step(&dv(&[0.0]), &dv(&[1.0]), &spec, &dv(&[0.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("`noise_draw`"), "{err}");
    }

    #[test]
    fn run_hand_recursion() {
        let spec = scalar(ReservoirKind::Linear, 0.5, 1.0);
        let inputs = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 1.0]);
        let x = run(&spec, &inputs, 3, 0, 0).unwrap();
        assert_eq!(x.as_slice(), &[1.0, -0.5, 0.75]);
    }

    #[test]
    fn run_passthrough_equals_inputs() {
        let spec = ReservoirSpec::from_matrices(
            ReservoirKind::Linear,
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let inputs = draw_inputs(2, 50, 9);
        let x = run(&spec, &inputs, 50, 0, 1).unwrap();
        assert_eq!(x, inputs);
    }

    #[test]
    fn run_is_deterministic() {
        let spec = ReservoirSpec::generate(ReservoirKind::EchoState, 6, 1, 0.9, 1.0, 3).unwrap();
        let inputs = draw_inputs(1, 300, 5);
        let a = run(&spec, &inputs, 200, 100, 17).unwrap();
        let b = run(&spec, &inputs, 200, 100, 17).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn divergent_linear_reports_step() {
        let spec = scalar(ReservoirKind::Linear, 1e200, 1.0);
        let inputs = DMatrix::from_element(1, 20, 1.0);
        match run(&spec, &inputs, 10, 10, 0) {
            Err(Error::NonFinite { step }) => assert!((2..=20).contains(&step)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn generated_spectral_radius_matches() {
        for (n, rho) in [(10, 0.5), (50, 0.9), (3, 1.5)] {
            let spec = ReservoirSpec::generate(ReservoirKind::Linear, n, 1, rho, 0.3, n as u64).unwrap();
            assert!((spec.spectral_radius - rho).abs() <= 1e-9, "{}", spec.spectral_radius);
            assert!(spec.input.iter().all(|v| v.abs() <= 0.3));
        }
    }

    #[test]
    fn noiseless_ensemble_has_zero_residuals() {
        let spec = ReservoirSpec::generate(ReservoirKind::EchoState, 4, 1, 0.8, 1.0, 2).unwrap();
        let ens = ensemble_run(&spec, &StreamSeeds::new(4), 100, 50, 5).unwrap();
        assert!(ens.residuals.iter().all(|r| r.iter().all(|&v| v == 0.0)));
        assert_eq!(ens.inputs.ncols(), 100);
    }

    #[test]
    fn single_realization_ensemble() {
        let spec = ReservoirSpec::generate(ReservoirKind::Linear, 3, 1, 0.5, 1.0, 2)
            .unwrap()
            .with_noise_variances(NoiseLocation::Output, &[0.1, 0.2, 0.3])
            .unwrap();
        let ens = ensemble_run(&spec, &StreamSeeds::new(4), 64, 10, 1).unwrap();
        assert_eq!(ens.mean, ens.realizations[0]);
        assert!(ens.residuals[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_mean_is_zero() {
        let spec = ReservoirSpec::generate(ReservoirKind::EchoState, 5, 1, 0.9, 1.0, 6)
            .unwrap()
            .with_noise_variances(NoiseLocation::State, &[0.05; 5])
            .unwrap();
        let ens = ensemble_run(&spec, &StreamSeeds::new(8), 400, 100, 7).unwrap();
        let resid_mean = mean_of(&ens.residuals);
        let scale = ens.realizations.iter().map(|x| x.amax()).fold(0.0, f64::max);
        assert!(resid_mean.amax() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn ensemble_is_bitwise_reproducible() {
        let spec = ReservoirSpec::generate(ReservoirKind::Linear, 4, 1, 0.7, 1.0, 1)
            .unwrap()
            .with_noise_variances(NoiseLocation::State, &[0.2; 4])
            .unwrap();
        let seeds = StreamSeeds::new(99);
        let a = ensemble_run(&spec, &seeds, 300, 20, 6).unwrap();
        let b = par::with_jobs(1, || ensemble_run(&spec, &seeds, 300, 20, 6).unwrap());
        assert_eq!(a.mean.as_slice(), b.mean.as_slice());
        for (x, y) in a.realizations.iter().zip(&b.realizations) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }

    #[test]
    fn output_noise_variance_concentrates() {
        // A = B = 0 so outputs are pure N(0, σ²) noise.
        let sigma2 = 0.49;
        let spec = ReservoirSpec::from_matrices(
            ReservoirKind::Linear,
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
        )
        .unwrap()
        .with_noise_variances(NoiseLocation::Output, &[sigma2, sigma2])
        .unwrap();
        let (r, t) = (20usize, 5000usize);
        let ens = ensemble_run(&spec, &StreamSeeds::new(2), t, 0, r).unwrap();
        let count = (r * t) as f64;
        for k in 0..2 {
            let var = ens
                .realizations
                .iter()
                .flat_map(|x| x.row(k).iter().copied().collect::<Vec<_>>())
                .map(|v| v * v)
                .sum::<f64>()
                / count;
            let tol = 3.0 * sigma2 * (2.0 / count).sqrt();
            assert!((var - sigma2).abs() <= tol, "var {var} tol {tol}");
        }
        assert!(ens.mean.amax() < 5.0 * (sigma2 / r as f64).sqrt());
    }

    #[test]
    fn probe_identical_starts() {
        let spec = ReservoirSpec::generate(ReservoirKind::EchoState, 5, 1, 0.9, 1.0, 1).unwrap();
        let s0 = DVector::from_element(5, 0.3);
        let p = fading_memory_probe(&spec, &s0, &s0, 50, 2).unwrap();
        assert!(p.divergence.iter().all(|&d| d == 0.0));
        assert!(p.pass);
    }

    #[test]
    fn probe_linear_geometric_decay() {
        let spec = ReservoirSpec::from_matrices(
            ReservoirKind::Linear,
            DMatrix::identity(3, 3) * 0.5,
            DMatrix::from_element(3, 1, 1.0),
        )
        .unwrap();
        let a = dv(&[1.0, -2.0, 0.5]);
        let b = dv(&[0.0, 1.0, 3.0]);
        let p = fading_memory_probe(&spec, &a, &b, 40, 3).unwrap();
        let d0 = (&a - &b).norm();
        for (t, d) in p.divergence.iter().enumerate() {
            assert_relative_eq!(*d, 0.5f64.powi(t as i32 + 1) * d0, max_relative = 1e-12);
        }
    }

    #[test]
    fn probe_echo_state_regression() {
        let spec = ReservoirSpec::generate(ReservoirKind::EchoState, 20, 1, 0.9, 1.0, 12).unwrap();
        let mut rng = seeds::rng(5);
        let unif = Uniform::new_inclusive(-1.0, 1.0).unwrap();
        let a = DVector::from_fn(20, |_, _| rng.sample(unif));
        let b = DVector::from_fn(20, |_, _| rng.sample(unif));
        let p = fading_memory_probe(&spec, &a, &b, 200, 6).unwrap();
        assert!(p.pass, "final divergence {:?}", p.divergence.last());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn echo_state_outputs_bounded(seed in any::<u64>(), rho in 0.1f64..1.5, scale in 0.1f64..5.0) {
            let spec = ReservoirSpec::generate(ReservoirKind::EchoState, 6, 1, rho, scale, seed).unwrap();
            let inputs = draw_inputs(1, 200, seed ^ 1);
            let x = run(&spec, &inputs, 150, 50, 0).unwrap();
            prop_assert!(x.iter().all(|v| v.abs() <= 1.0));
        }

        #[test]
        fn contractive_linear_stays_bounded(seed in any::<u64>(), rho in 0.0f64..0.95) {
            let spec = ReservoirSpec::from_matrices(
                ReservoirKind::Linear,
                DMatrix::identity(3, 3) * rho,
                DMatrix::from_element(3, 1, 1.0),
            ).unwrap();
            let inputs = draw_inputs(1, 500, seed);
            let x = run(&spec, &inputs, 500, 0, 0).unwrap();
            let bound = spec.input.norm() / (1.0 - rho);
            prop_assert!(x.iter().all(|v| v.is_finite() && v.abs() <= bound + 1e-12));
        }
    }
}
