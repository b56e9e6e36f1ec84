// SPDX-License-Identifier: Apache-2.0

//! Information processing capacity (IPC) of noisy discrete-time reservoirs.
//!
//! The crate simulates driven stochastic reservoirs, measures how much of an
//! orthonormal polynomial target basis a linear readout can reconstruct, and
//! independently computes the noise-covariance bound
//! `Tr((I + Q̃ξ)⁻¹)` from an ensemble of noise realizations.
//!
//! ```text
//! ReservoirSpec ──run──▶ X (n×T) ──capacity──▶ CapacityReport (measured IPC)
//!        │
//!        └──ensemble──▶ Qη, Qξ ──normalize──▶ Q̃ξ ──▶ bound
//! ```

pub mod basis;
pub mod capacity;
pub mod cli;
pub mod config;
mod error;
pub mod fixtures;
pub mod linalg;
pub mod noise;
pub mod par;
pub mod reservoir;
pub mod seeds;
pub mod selftest;

pub use basis::{enumerate_basis, evaluate_basis, evaluate_targets, BasisIndex, BasisSet};
pub use capacity::{
    capacity, ipc_estimate, optimal_weights, reconstruction_error, significance_threshold,
    CapacityReport,
};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use linalg::{pinv, pinv_sqrt, sym_eig, SpectralDecomposition};
pub use noise::{
    estimate_moments, ipc_bound, normalize_noise, overlap_matrix, verify_bound, BoundExperiment,
    BoundReport, MomentDecomposition, NormalizedNoise,
};
pub use reservoir::{
    ensemble_run, fading_memory_probe, run, step, NoiseLocation, OutputEnsemble, ReservoirKind,
    ReservoirSpec,
};
pub use seeds::StreamSeeds;
