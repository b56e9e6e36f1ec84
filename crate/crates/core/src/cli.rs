// SPDX-License-Identifier: Apache-2.0

//! Command-line front end: `ipc-lab simulate|ipc|bound|sweep|selftest`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::basis::TargetEvaluator;
use crate::capacity::{self, AnalysisOptions, ReportMetadata};
use crate::config::{resolve_seed, ExperimentConfig, RunManifest, StageTiming};
use crate::noise::{verify_bound, BoundReport};
use crate::reservoir::{self, ReservoirSpec};
use crate::seeds::StreamSeeds;
use crate::{par, selftest, Error, Result};

/// Write via a temporary sibling file and rename, so readers never observe a
/// partially written result.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    write_atomic(path, text.as_bytes())
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}

/// Time-major CSV: one row per step, `t` then one column per row of `m`.
fn write_series(path: &Path, prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((0..m.nrows()).map(|k| format!("{prefix}{k}")));
    w.write_record(&header).map_err(io)?;
    for (t, col) in m.column_iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(col.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Parser)]
#[command(name = "ipc-lab", version, about = "Information processing capacity of noisy reservoirs")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one noise realization and write inputs.csv and outputs.csv.
    Simulate(RunArgs),
    /// Measure per-target capacities and the thresholded IPC.
    Ipc(RunArgs),
    /// Compare measured IPC with the noise-covariance bound.
    Bound(RunArgs),
    /// Run `bound` over the config's sweep values.
    Sweep(RunArgs),
    /// Run the embedded numerical checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Overrides IPC_LAB_SEED and the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Multiplier applied to every check tolerance.
    #[arg(long, default_value_t = 1.0)]
    tol_scale: f64,
    /// Directory for selftest.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

/// Parse `args` (including the program name), run, and return the exit code:
/// 0 success, 1 verification failure, 2 config/IO error, 3 numerical error.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(&format!("\n  caused by: {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Simulate(a) => Session::open("simulate", &a)?.simulate(),
        Command::Ipc(a) => Session::open("ipc", &a)?.ipc(),
        Command::Bound(a) => Session::open("bound", &a)?.bound(),
        Command::Sweep(a) => Session::open("sweep", &a)?.sweep(),
        Command::Selftest(a) => selftest_command(&a),
    }
}

fn selftest_command(args: &SelftestArgs) -> Result<bool> {
    let report = par::with_jobs(args.jobs, || selftest::run_selftest(args.tol_scale))?;
    for c in &report.checks {
        println!(
            "{:<4} {:<36} deviation {:>10.3e}  tolerance {:>10.3e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.deviation,
            c.tolerance
        );
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        report.write_csv(&out.join("selftest.csv"))?;
    }
    Ok(report.pass())
}

struct Session {
    command: &'static str,
    cfg: ExperimentConfig,
    seeds: StreamSeeds,
    out: PathBuf,
    jobs: usize,
    started: Instant,
    started_unix: u64,
    stages: Vec<StageTiming>,
}

impl Session {
    fn open(command: &'static str, args: &RunArgs) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&args.config)?;
        cfg.seed = resolve_seed(args.seed, cfg.seed)?;
        std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
        Ok(Self {
            command,
            seeds: StreamSeeds::new(cfg.seed),
            cfg,
            out: args.out.clone(),
            jobs: args.jobs,
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            stages: Vec::new(),
        })
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T> + Send) -> Result<T>
    where
        T: Send,
    {
        let start = Instant::now();
        let out = par::with_jobs(self.jobs, f);
        let secs = start.elapsed().as_secs_f64();
        log::info!("{} {stage}: {secs:.3}s", self.command);
        self.stages.push(StageTiming { stage: stage.into(), secs });
        out
    }

    fn finish(self, spec_digest: String) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.into(),
            config_digest: self.cfg.digest(),
            spec_digest,
            master_seed: self.seeds.master,
            seeds: self.seeds.manifest(self.cfg.sim.realizations),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            parallel: par::is_parallel(),
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            stages: self.stages,
            config: self.cfg,
        };
        write_json(&self.out.join("manifest.json"), &manifest)
    }

    fn spec(&mut self) -> Result<ReservoirSpec> {
        let (cfg, seed) = (self.cfg.clone(), self.seeds.matrices());
        self.timed("build", move || cfg.build_spec(seed))
    }

    fn simulate(mut self) -> Result<bool> {
        let spec = self.spec()?;
        let (t, washout) = (self.cfg.sim.t, self.cfg.sim.washout);
        let inputs = reservoir::draw_inputs(1, washout + t, self.seeds.inputs());
        let noise_seed = self.seeds.noise(0);
        let x = self.timed("simulate", || reservoir::run(&spec, &inputs, t, washout, noise_seed))?;
        let u = inputs.columns(washout, t).into_owned();
        write_series(&self.out.join("inputs.csv"), "u", &u)?;
        write_series(&self.out.join("outputs.csv"), "x", &x)?;
        println!("simulated n={} T={t} -> {}", spec.state_dim(), self.out.display());
        self.finish(spec.digest())?;
        Ok(true)
    }

    fn ipc(mut self) -> Result<bool> {
        let spec = self.spec()?;
        let basis = self.cfg.build_basis()?;
        let (t, washout) = (self.cfg.sim.t, self.cfg.sim.washout);
        let inputs = reservoir::draw_inputs(1, washout + t, self.seeds.inputs());
        let noise_seed = self.seeds.noise(0);
        let x = self.timed("simulate", || reservoir::run(&spec, &inputs, t, washout, noise_seed))?;
        let u: Vec<f64> = inputs.columns(washout, t).iter().copied().collect();
        let opts = AnalysisOptions {
            n_shuffles: self.cfg.capacity.n_shuffles,
            n_blocks: self.cfg.capacity.bootstrap_blocks,
            bootstrap_reps: self.cfg.capacity.bootstrap_reps,
            seed: self.seeds.analysis(),
            ..Default::default()
        };
        let metadata = ReportMetadata {
            r: 1,
            seeds: Some(self.seeds.manifest(1)),
            spec_digest: Some(spec.digest()),
            ..Default::default()
        };
        let analysis = self.timed("capacity", || {
            let ev = TargetEvaluator::for_basis(&u, &basis)?;
            capacity::analyze(x.columns(ev.offset(), ev.len()), &ev, &basis, &opts, metadata)
        })?;
        let report = &analysis.report;
        report.write_csv(&self.out.join("capacities.csv"))?;
        let mut summary = report.summary_json();
        summary["stderr"] = analysis.stderr.into();
        summary["null_capacities"] = analysis.null_capacities.clone().into();
        write_json(&self.out.join("ipc.json"), &summary)?;
        println!(
            "IPC {:.6} ± {:.6} over D={} targets (threshold {:.3e})",
            report.ipc_total,
            analysis.stderr,
            report.per_target.len(),
            report.threshold
        );
        self.finish(spec.digest())?;
        Ok(true)
    }

    fn bound(mut self) -> Result<bool> {
        let spec = self.spec()?;
        let digest = spec.digest();
        let exp = self.cfg.experiment(spec, self.seeds)?;
        let report = self.timed("bound", || verify_bound(&exp))?;
        report.capacity.write_csv(&self.out.join("capacities.csv"))?;
        write_rows(&self.out.join("bound.csv"), &[BoundRow::from_report(None, &report)])?;
        write_json(&self.out.join("bound.json"), &report)?;
        println!(
            "{} measured {:.6} <= bound {:.6} + {:.4} (full-rank {:.6})",
            if report.pass { "PASS" } else { "FAIL" },
            report.ipc_measured,
            report.ipc_bound,
            report.tol_stat,
            report.bound_fullrank
        );
        let pass = report.pass;
        self.finish(digest)?;
        Ok(pass)
    }

    fn sweep(mut self) -> Result<bool> {
        let sweep = self
            .cfg
            .sweep
            .clone()
            .ok_or_else(|| Error::Config("sweep command needs a [sweep] section".into()))?;
        let points: Vec<ExperimentConfig> = sweep
            .values
            .iter()
            .map(|&v| self.cfg.with_value(&sweep.parameter, v))
            .collect::<Result<_>>()?;
        let dir = self.out.join("points");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let master = self.seeds;
        let rows = self.timed("sweep", || {
            let rows = par::map_range(points.len(), |i| {
                run_point(&points[i], master, i, sweep.values[i], &dir)
            });
            rows.into_iter().collect::<Result<Vec<_>>>()
        })?;
        write_rows(&self.out.join("sweep.csv"), &rows)?;
        let pass = rows.iter().all(|r| r.pass);
        for r in &rows {
            println!(
                "{}={} measured {:.6} bound {:.6} {}",
                sweep.parameter,
                r.sweep_value.unwrap_or(f64::NAN),
                r.ipc_measured,
                r.ipc_bound,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        self.finish(String::new())?;
        Ok(pass)
    }
}

/// One sweep point. The reservoir matrices come from the point's own master
/// seed, so a sweep over noise strength keeps the reservoir fixed; inputs,
/// noise and analysis streams use a per-point seed. Numerical failures are
/// recorded as failing rows rather than aborting the sweep.
fn run_point(
    cfg: &ExperimentConfig,
    master: StreamSeeds,
    index: usize,
    value: f64,
    dir: &Path,
) -> Result<BoundRow> {
    let point_seeds = StreamSeeds::new(master.sweep_point(index));
    let outcome = cfg
        .build_spec(StreamSeeds::new(cfg.seed).matrices())
        .and_then(|spec| verify_bound(&cfg.experiment(spec, point_seeds)?));
    let path = dir.join(format!("point_{index:03}.json"));
    let row = match &outcome {
        Ok(report) => {
            write_json(&path, report)?;
            BoundRow::from_report(Some(value), report)
        }
        Err(e) => {
            log::warn!("sweep point {index} ({value}) failed: {e}");
            let note = e.to_string();
            write_json(&path, &serde_json::json!({ "sweep_value": value, "error": note }))?;
            BoundRow {
                sweep_value: Some(value),
                n: cfg.reservoir.n,
                t: cfg.sim.t,
                r: cfg.sim.realizations,
                d: 0,
                ipc_measured: f64::NAN,
                ipc_bound: f64::NAN,
                bound_fullrank: f64::NAN,
                margin: f64::NAN,
                tol_stat: f64::NAN,
                pass: false,
                seed: point_seeds.master,
                note,
            }
        }
    };
    Ok(row)
}

#[derive(Debug, Clone, Serialize)]
struct BoundRow {
    sweep_value: Option<f64>,
    n: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "R")]
    r: usize,
    #[serde(rename = "D")]
    d: usize,
    ipc_measured: f64,
    ipc_bound: f64,
    bound_fullrank: f64,
    margin: f64,
    tol_stat: f64,
    pass: bool,
    seed: u64,
    note: String,
}

impl BoundRow {
    fn from_report(sweep_value: Option<f64>, r: &BoundReport) -> Self {
        Self {
            sweep_value,
            n: r.n,
            t: r.t_effective,
            r: r.realizations,
            d: r.d,
            ipc_measured: r.ipc_measured,
            ipc_bound: r.ipc_bound,
            bound_fullrank: r.bound_fullrank,
            margin: r.margin,
            tol_stat: r.tol_stat,
            pass: r.pass,
            seed: r.seed,
            note: String::new(),
        }
    }
}
