// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration (TOML) and run manifests.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{enumerate_basis, BasisSet};
use crate::capacity::MIN_SHUFFLES;
use crate::fixtures;
use crate::noise::BoundExperiment;
use crate::reservoir::{NoiseLocation, ReservoirKind, ReservoirSpec, DEFAULT_WASHOUT};
use crate::seeds::{SeedManifest, StreamSeeds};
use crate::{Error, Result};

pub const SEED_ENV: &str = "IPC_LAB_SEED";

/// Scalar fields a sweep may vary.
pub const SWEEPABLE: &[&str] = &[
    "seed",
    "reservoir.n",
    "reservoir.spectral_radius",
    "reservoir.input_scale",
    "noise.sigma",
    "sim.T",
    "sim.washout",
    "sim.realizations",
    "basis.max_degree",
    "basis.max_delay",
    "capacity.n_shuffles",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub reservoir: ReservoirSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub input: InputSection,
    pub sim: SimSection,
    pub basis: BasisSection,
    #[serde(default)]
    pub capacity: CapacitySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirSection {
    pub kind: ReservoirKind,
    pub n: usize,
    pub spectral_radius: f64,
    #[serde(default = "one")]
    pub input_scale: f64,
    /// Linear only: transform states so the signal second moment is `I`.
    #[serde(default)]
    pub whiten: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub location: NoiseLocation,
    /// Isotropic noise, `Σ = σ² I`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Diagonal noise, `Σ = diag(variances)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
    /// Full n×n covariance as CSV without header, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSection {
    #[serde(default = "uniform")]
    pub dist: String,
}

impl Default for InputSection {
    fn default() -> Self {
        Self { dist: uniform() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(rename = "T", alias = "t")]
    pub t: usize,
    #[serde(default = "default_washout")]
    pub washout: usize,
    #[serde(default = "one_usize")]
    pub realizations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub max_degree: u32,
    pub max_delay: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySection {
    #[serde(default = "default_shuffles")]
    pub n_shuffles: usize,
    #[serde(default = "default_blocks")]
    pub bootstrap_blocks: usize,
    #[serde(default = "default_reps")]
    pub bootstrap_reps: usize,
}

impl Default for CapacitySection {
    fn default() -> Self {
        Self {
            n_shuffles: default_shuffles(),
            bootstrap_blocks: default_blocks(),
            bootstrap_reps: default_reps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: String,
    pub values: Vec<f64>,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn uniform() -> String {
    "uniform".into()
}
fn default_washout() -> usize {
    DEFAULT_WASHOUT
}
fn default_shuffles() -> usize {
    MIN_SHUFFLES
}
fn default_blocks() -> usize {
    50
}
fn default_reps() -> usize {
    200
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse and validate; relative `covariance_file` paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(file) = cfg.noise.covariance_file.as_mut() {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    *file = dir.join(&*file);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.reservoir;
        if r.n == 0 {
            return Err(config_err("reservoir.n must be >= 1"));
        }
        if !(r.spectral_radius.is_finite() && r.spectral_radius >= 0.0) {
            return Err(config_err("reservoir.spectral_radius must be finite and >= 0"));
        }
        if !(r.input_scale.is_finite() && r.input_scale > 0.0) {
            return Err(config_err("reservoir.input_scale must be finite and > 0"));
        }
        if r.whiten && r.kind != ReservoirKind::Linear {
            return Err(config_err("reservoir.whiten requires kind = \"linear\""));
        }
        if self.input.dist != "uniform" {
            return Err(config_err(format!(
                "input.dist = {:?} is not supported; only \"uniform\"",
                self.input.dist
            )));
        }
        let n = &self.noise;
        let given = [n.sigma.is_some(), n.variances.is_some(), n.covariance_file.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if given > 1 {
            return Err(config_err(
                "noise: give at most one of sigma, variances, covariance_file",
            ));
        }
        if let Some(s) = n.sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(config_err("noise.sigma must be finite and >= 0"));
            }
        }
        if let Some(v) = &n.variances {
            if v.len() != r.n {
                return Err(config_err(format!(
                    "noise.variances has {} entries, reservoir.n = {}",
                    v.len(),
                    r.n
                )));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(config_err("noise.variances must be finite and >= 0"));
            }
        }
        if n.location != NoiseLocation::None && given == 0 {
            return Err(config_err(
                "noise.location is set but no sigma, variances or covariance_file given",
            ));
        }
        if self.sim.t == 0 {
            return Err(config_err("sim.T must be >= 1"));
        }
        if self.sim.realizations == 0 {
            return Err(config_err("sim.realizations must be >= 1"));
        }
        if self.basis.max_degree == 0 {
            return Err(config_err("basis.max_degree must be >= 1"));
        }
        if self.sim.t <= self.basis.max_delay {
            return Err(config_err("sim.T must exceed basis.max_delay"));
        }
        if self.capacity.n_shuffles < MIN_SHUFFLES {
            return Err(config_err(format!(
                "capacity.n_shuffles must be >= {MIN_SHUFFLES}"
            )));
        }
        if self.capacity.bootstrap_blocks == 0 {
            return Err(config_err("capacity.bootstrap_blocks must be >= 1"));
        }
        if let Some(sw) = &self.sweep {
            if !SWEEPABLE.contains(&sw.parameter.as_str()) {
                return Err(config_err(format!(
                    "sweep.parameter {:?} is not a sweepable scalar field; expected one of {SWEEPABLE:?}",
                    sw.parameter
                )));
            }
            if sw.values.is_empty() || sw.values.iter().any(|v| !v.is_finite()) {
                return Err(config_err("sweep.values must be a non-empty list of finite numbers"));
            }
            if sw.parameter == "noise.sigma" && n.location == NoiseLocation::None {
                return Err(config_err("sweeping noise.sigma requires noise.location"));
            }
        }
        Ok(())
    }

    /// Copy of the config with one sweepable field set to `value`.
    pub fn with_value(&self, parameter: &str, value: f64) -> Result<Self> {
        let mut c = self.clone();
        let int = || -> Result<usize> {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(config_err(format!("{parameter} needs a nonnegative integer, got {value}")))
            }
        };
        match parameter {
            "seed" => c.seed = int()? as u64,
            "reservoir.n" => c.reservoir.n = int()?,
            "reservoir.spectral_radius" => c.reservoir.spectral_radius = value,
            "reservoir.input_scale" => c.reservoir.input_scale = value,
            "noise.sigma" => {
                c.noise.sigma = Some(value);
                c.noise.variances = None;
                c.noise.covariance_file = None;
            }
            "sim.T" => c.sim.t = int()?,
            "sim.washout" => c.sim.washout = int()?,
            "sim.realizations" => c.sim.realizations = int()?,
            "basis.max_degree" => c.basis.max_degree = int()? as u32,
            "basis.max_delay" => c.basis.max_delay = int()?,
            "capacity.n_shuffles" => c.capacity.n_shuffles = int()?,
            other => return Err(config_err(format!("unknown sweep parameter {other:?}"))),
        }
        c.sweep = None;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn noise_covariance(&self) -> Result<Option<DMatrix<f64>>> {
        let n = self.reservoir.n;
        let nz = &self.noise;
        if let Some(s) = nz.sigma {
            return Ok(Some(DMatrix::identity(n, n) * (s * s)));
        }
        if let Some(v) = &nz.variances {
            return Ok(Some(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v))));
        }
        if let Some(path) = &nz.covariance_file {
            return read_matrix_csv(path, n).map(Some);
        }
        Ok(None)
    }

    /// Reservoir with matrices drawn from `matrix_seed`.
    pub fn build_spec(&self, matrix_seed: u64) -> Result<ReservoirSpec> {
        let r = &self.reservoir;
        let mut spec = ReservoirSpec::generate(r.kind, r.n, 1, r.spectral_radius, r.input_scale, matrix_seed)?;
        if r.whiten {
            spec = fixtures::whiten_linear(&spec)?;
        }
        if let Some(cov) = self.noise_covariance()? {
            spec = spec.with_noise(self.noise.location, cov)?;
        }
        Ok(spec)
    }

    pub fn build_basis(&self) -> Result<BasisSet> {
        enumerate_basis(self.basis.max_degree, self.basis.max_delay)
    }

    pub fn experiment(&self, spec: ReservoirSpec, seeds: StreamSeeds) -> Result<BoundExperiment> {
        let mut exp = BoundExperiment::new(spec, self.build_basis()?, self.sim.t, self.sim.realizations, 0);
        exp.seeds = seeds;
        exp.washout = self.sim.washout;
        exp.n_shuffles = self.capacity.n_shuffles;
        exp.n_blocks = self.capacity.bootstrap_blocks;
        exp.bootstrap_reps = self.capacity.bootstrap_reps;
        Ok(exp)
    }
}

fn read_matrix_csv(path: &Path, n: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut values = Vec::with_capacity(n * n);
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        rows += 1;
        if rec.len() != n {
            return Err(config_err(format!(
                "{} line {rows}: expected {n} columns, found {}",
                path.display(),
                rec.len()
            )));
        }
        for f in rec.iter() {
            values.push(f.parse::<f64>().map_err(|e| {
                config_err(format!("{} line {rows}: {e}", path.display()))
            })?);
        }
    }
    if rows != n {
        return Err(config_err(format!("{}: expected {n} rows, found {rows}", path.display())));
    }
    Ok(DMatrix::from_row_slice(n, n, &values))
}

/// Seed precedence: command line, then `IPC_LAB_SEED`, then the config.
pub fn resolve_seed(cli: Option<u64>, config: u64) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| config_err(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(config),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub spec_digest: String,
    pub master_seed: u64,
    pub seeds: SeedManifest,
    pub tool_version: String,
    pub parallel: bool,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub stages: Vec<StageTiming>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub secs: f64,
}
