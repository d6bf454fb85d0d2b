//! The `ddp` command line: `train`, `verify` and `analyze`.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 training
//! divergence (or a failed verification), 3 path-count limit exceeded.

pub mod suites;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ddp_core::paths::{analyze, DEFAULT_PATH_LIMIT, DEFAULT_RANK_TOL};
use ddp_core::train::dataset::read_numeric_csv;
use ddp_core::train::{train_loop_with, write_checkpoint, MetricsWriter, TrainConfig};
use ddp_core::{Error, NetworkTopology, WeightVector};
use serde::Serialize;

use crate::suites::{Suite, SuiteReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_PATH_LIMIT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ddp", version, about = "Data-dependent path geometry for ReLU networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network from a JSON config; writes metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a property suite on seeded random instances.
    Verify {
        /// One of orthogonality, natgrad-equivalence, pathsgd-equivalence,
        /// rescaling, rank, gradcheck, reconstruction, all.
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Path and degrees-of-freedom analysis of a trained network.
    Analyze {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Headered CSV; the first |V_in| columns are used as inputs.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Seed for the probe inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_PATH_LIMIT)]
        path_limit: usize,
        #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
        rank_tol: f64,
    },
}

/// Maps a library error to the documented exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::PathLimit { .. } => EXIT_PATH_LIMIT,
        _ => EXIT_CONFIG,
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train { config, out: dir } => cmd_train(&config, dir.as_deref(), out, err),
        Command::Verify { suite, seed, trials, report } => cmd_verify(&suite, seed, trials, report.as_deref(), out, err),
        Command::Analyze { net, weights, data, report, seed, path_limit, rank_tol } => {
            cmd_analyze(&net, &weights, &data, &report, seed, path_limit, rank_tol, out, err)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn echo<T: Serialize>(err: &mut dyn Write, what: &str, value: &T) -> ddp_core::Result<()> {
    writeln!(err, "{what}: {}", serde_json::to_string(value)?)?;
    Ok(())
}

pub fn cmd_train(config_path: &Path, dir: Option<&Path>, out: &mut dyn Write, err: &mut dyn Write) -> ddp_core::Result<i32> {
    let config = TrainConfig::load(config_path)?;
    let dir = dir
        .map(Path::to_path_buf)
        .or_else(|| config.out.clone())
        .ok_or_else(|| Error::Config { field: "out".into(), message: "no output directory given".into() })?;
    echo(err, "config", &config)?;
    std::fs::create_dir_all(&dir)?;
    let mut writer = MetricsWriter::create(dir.join("metrics.jsonl"))?;
    let outcome = train_loop_with(&config, |record, _| writer.append(record));
    writer.finish()?;
    let outcome = outcome?;
    write_checkpoint(&dir, &config, &outcome)?;
    let last = outcome.metrics.last().expect("at least one step");
    writeln!(out, "trained {} steps, final minibatch loss {:e}", outcome.metrics.len(), last.loss)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    seed: u64,
    trials: usize,
    suites: Vec<SuiteReport>,
    passed: bool,
}

pub fn cmd_verify(
    suite: &str,
    seed: u64,
    trials: usize,
    report_path: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> ddp_core::Result<i32> {
    let selected: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(|m: String| Error::Config { field: "suite".into(), message: m })?]
    };
    if trials == 0 {
        return Err(Error::Config { field: "trials".into(), message: "must be positive".into() });
    }
    echo(err, "verify", &serde_json::json!({ "suite": suite, "seed": seed, "trials": trials }))?;
    let mut reports = Vec::new();
    for s in selected {
        let report = s.run(seed, trials)?;
        let worst = report.trials.iter().map(|t| t.max_error).fold(0.0, f64::max);
        writeln!(
            out,
            "{:<20} {}  worst error {worst:.3e} (tolerance {:.0e})",
            s.name(),
            if report.passed { "PASS" } else { "FAIL" },
            s.tolerance()
        )?;
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.passed);
    let report = VerifyReport { seed, trials, suites: reports, passed };
    if let Some(path) = report_path {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(if passed { EXIT_OK } else { EXIT_DIVERGED })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    net: &Path,
    weights: &Path,
    data: &Path,
    report_path: &Path,
    seed: u64,
    path_limit: usize,
    rank_tol: f64,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> ddp_core::Result<i32> {
    echo(
        err,
        "analyze",
        &serde_json::json!({
            "net": net, "weights": weights, "data": data, "report": report_path,
            "seed": seed, "path_limit": path_limit, "rank_tol": rank_tol,
        }),
    )?;
    let topology = NetworkTopology::load(net)?;
    let w = WeightVector::load(weights)?;
    if w.len() != topology.num_edges() {
        return Err(Error::DimensionMismatch { what: "weights file", expected: topology.num_edges(), got: w.len() });
    }
    let table = read_numeric_csv(data)?;
    let d = topology.inputs().len();
    if table.ncols() < d {
        return Err(Error::DimensionMismatch { what: "data columns", expected: d, got: table.ncols() });
    }
    let inputs = table.columns(0, d).into_owned();
    let mut rng = ddp_core::instances::rng(seed);
    let report = analyze(&topology, &w, &inputs, path_limit, rank_tol, &mut rng)?;
    std::fs::write(report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    writeln!(
        out,
        "paths {}  rank_J {}  predicted {}  d_G {}  d_GD {}",
        report.paths, report.rank_j, report.predicted_rank, report.d_g, report.d_gd
    )?;
    if let Some(warning) = &report.warning {
        writeln!(err, "warning: {warning}")?;
    }
    Ok(EXIT_OK)
}
