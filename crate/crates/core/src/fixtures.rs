// SPDX-License-Identifier: Apache-2.0

//! Reference reservoirs with known moments.

use nalgebra::DMatrix;

use crate::linalg::{self, DEFAULT_REL_TOL};
use crate::reservoir::{NoiseLocation, ReservoirKind, ReservoirSpec};
use crate::{Error, Result};

/// Variance of a uniform `[−1, 1]` input.
pub const UNIFORM_INPUT_VARIANCE: f64 = 1.0 / 3.0;

/// Stationary state covariance of a noiseless linear reservoir driven by
/// i.i.d. uniform inputs: `P = A P Aᵀ + B Bᵀ / 3`.
pub fn stationary_state_covariance(spec: &ReservoirSpec) -> Result<DMatrix<f64>> {
    if spec.kind != ReservoirKind::Linear {
        return Err(Error::InvalidArgument(
            "stationary covariance is only available for linear reservoirs".into(),
        ));
    }
    let q = &spec.input * spec.input.transpose() * UNIFORM_INPUT_VARIANCE;
    linalg::stationary_covariance(&spec.recurrent, &q)
}

/// Similarity transform `s' = G s` with `G = P^{-1/2}` so that the signal
/// second moment of the new linear reservoir is the identity. Noise settings
/// are dropped.
pub fn whiten_linear(spec: &ReservoirSpec) -> Result<ReservoirSpec> {
    let p = stationary_state_covariance(spec)?;
    let dec = linalg::sym_eig(&p, DEFAULT_REL_TOL)?;
    if dec.rank < dec.dim() {
        return Err(Error::InvalidArgument(
            "reservoir state covariance is singular; cannot whiten".into(),
        ));
    }
    let g = dec.map_spectrum(|_, l| l.sqrt().recip());
    let g_inv = dec.map_spectrum(|_, l| l.sqrt());
    let a = &g * &spec.recurrent * g_inv;
    let b = &g * &spec.input;
    let mut out = ReservoirSpec::from_matrices(ReservoirKind::Linear, a, b)?;
    out.input_scale = spec.input_scale;
    Ok(out)
}

/// Random linear reservoir with `Qη = I` (in expectation).
pub fn whitened_linear(n: usize, rho: f64, seed: u64) -> Result<ReservoirSpec> {
    whiten_linear(&ReservoirSpec::generate(ReservoirKind::Linear, n, 1, rho, 1.0, seed)?)
}

/// Output-noise covariance produced by state noise `Σ_s` in a linear
/// reservoir: the stationary solution of `Qξ = A Qξ Aᵀ + Σ_s`.
pub fn state_noise_output_covariance(
    spec: &ReservoirSpec,
    state_sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if spec.kind != ReservoirKind::Linear {
        return Err(Error::InvalidArgument(
            "state-noise propagation is only closed-form for linear reservoirs".into(),
        ));
    }
    linalg::stationary_covariance(&spec.recurrent, state_sigma)
}

/// A state-noise reservoir and the output-noise reservoir with the same `Qξ`.
pub fn matched_noise_pair(
    spec: &ReservoirSpec,
    state_sigma: DMatrix<f64>,
) -> Result<(ReservoirSpec, ReservoirSpec)> {
    let q_xi = state_noise_output_covariance(spec, &state_sigma)?;
    let state = spec.clone().with_noise(NoiseLocation::State, state_sigma)?;
    let output = spec.clone().with_noise(NoiseLocation::Output, q_xi)?;
    Ok((state, output))
}

/// `(n+1)×n` map that appends a copy of output `k`.
pub fn duplicate_row_map(n: usize, k: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(n + 1, n);
    g.view_mut((0, 0), (n, n)).fill_with_identity();
    g[(n, k)] = 1.0;
    g
}
