//! Command-line front end.
//!
//! [`run`] parses argv, executes one subcommand, writes its outputs and a
//! [`RunManifest`] describing the run. `replay` re-executes a manifest and
//! checks that every deterministic output comes out byte for byte the same.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use manifest::{FileDigest, OutputDigest, RunManifest};

/// Environment variable consulted for `--seed` when the flag is absent.
pub const SEED_ENV: &str = "PROBMAP_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SCHEMA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, missing file)
  3  schema error (malformed or inconsistent input)
  4  numeric failure (divergence, oracle mismatch, replay mismatch)";

#[derive(Parser, Debug)]
#[command(name = "probmap", version, about = "Probabilistic polyline maps with low-rank plus diagonal covariances", after_help = EXIT_HELP)]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Emit logs on stderr as JSON lines.
    #[arg(long, global = true)]
    pub json_logs: bool,
    /// Manifest path. Defaults to `<first output>.manifest.json`; runs with
    /// no file output print the manifest on stderr.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", content = "config", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic scenario, optionally with residual samples.
    Gen(GenArgs),
    /// Fit one LRPD distribution per element of a scenario.
    Fit(FitArgs),
    /// Draw polylines from fitted distributions.
    Sample(SampleArgs),
    /// Per-point features and confidence-modulated embeddings.
    Encode(EncodeArgs),
    /// Chamfer mAP of map predictions.
    EvalMap(EvalMapArgs),
    /// minADE / minFDE / miss rate of trajectory predictions.
    EvalTraj(EvalTrajArgs),
    /// Compare the structured kernels against dense references.
    OracleCheck(OracleArgs),
    /// Time the NLL against the number of points.
    Bench(BenchArgs),
    /// Export |error| against predicted std as CSV.
    Calib(CalibArgs),
    /// Re-run a manifest and compare output digests.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Fit(_) => "fit",
            Command::Sample(_) => "sample",
            Command::Encode(_) => "encode",
            Command::EvalMap(_) => "eval-map",
            Command::EvalTraj(_) => "eval-traj",
            Command::OracleCheck(_) => "oracle-check",
            Command::Bench(_) => "bench",
            Command::Calib(_) => "calib",
            Command::Replay(_) => "replay",
        }
    }

    /// Fill in defaults that depend on other flags so the manifest records
    /// the configuration actually used.
    fn resolve(&mut self) {
        if let Command::Fit(a) = self {
            a.warmup.get_or_insert(a.epochs / 5);
            a.ramp.get_or_insert(a.epochs / 5);
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub elements: usize,
    #[arg(long, default_value_t = crate::geometry::DEFAULT_POINTS)]
    pub points: usize,
    /// Half-width of the map window in meters.
    #[arg(long, default_value_t = 30.0)]
    pub extent: f64,
    #[arg(long, default_value_t = 0)]
    pub agents: usize,
    #[arg(long, default_value_t = 20)]
    pub history: usize,
    #[arg(long, default_value_t = 30)]
    pub horizon: usize,
    /// Noise model as inline JSON or a path to a JSON file.
    #[arg(long)]
    pub noise: Option<String>,
    /// Residual samples drawn per element (requires --noise).
    #[arg(long, default_value_t = 0)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 24)]
    pub rank: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Diagonal-only epochs (default: 20% of epochs).
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Epochs over which κ ramps to 1 (default: 20% of epochs).
    #[arg(long)]
    pub ramp: Option<usize>,
    #[arg(long, default_value_t = 6e-4)]
    pub lr: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[arg(long)]
    pub learn_kappa: bool,
    /// Fit only this element.
    #[arg(long)]
    pub element: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write map predictions (ground truth shifted by the fitted mean).
    #[arg(long)]
    pub preds: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Add each element's ground truth to its samples.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub confidence: f64,
    /// FiLM weights JSON; random weights from --film-seed when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub film_seed: u64,
    #[arg(long, default_value_t = crate::encoding::DEFAULT_EMBED_DIM)]
    pub embed_dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMapArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = crate::metrics::MAP_THRESHOLDS)]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTrajArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = crate::metrics::NUM_MODES)]
    pub modes: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 50)]
    pub grad_trials: usize,
    #[arg(long, default_value_t = 50)]
    pub gauge_trials: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Point counts to time.
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 200, 400, 800])]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 24)]
    pub rank: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Skip the dense reference timings.
    #[arg(long)]
    pub no_dense: bool,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// Scenario holding residual samples for the same elements.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON summary with the Pearson correlation.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub file: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a run, reported on stderr as JSON.
#[derive(Clone, Debug, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, kind: "usage", message: message.into() }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self { code: EXIT_SCHEMA, kind: "schema", message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, kind: "numeric", message: message.into() }
    }

    fn to_json(&self) -> String {
        serde_json::json!({
            "error": { "code": self.code, "kind": self.kind, "message": self.message }
        })
        .to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => CliError::usage(e.to_string()),
            Error::Numerical(_) | Error::Undefined(_) => CliError::numeric(e.to_string()),
            Error::InvalidGeometry(_)
            | Error::InvalidParams(_)
            | Error::DimensionMismatch { .. }
            | Error::Schema(_)
            | Error::Json(_) => CliError::schema(e.to_string()),
        }
    }
}

/// One produced artifact. `path == None` means stdout.
#[derive(Clone, Debug)]
pub struct Artifact {
    pub path: Option<PathBuf>,
    pub bytes: Vec<u8>,
    /// Timing outputs cannot be reproduced and are exempt from replay.
    pub deterministic: bool,
}

/// Everything a subcommand produced, before anything touches disk.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<Artifact>,
    pub inputs: Vec<FileDigest>,
    pub seeds: std::collections::BTreeMap<String, u64>,
    /// Set when outputs exist but the run still failed (e.g. divergence).
    pub failure: Option<CliError>,
}

/// Execute a command without writing anything.
pub fn execute(cmd: &Command, threads: Option<usize>) -> Result<Outcome, CliError> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::usage(e.to_string()))?
            .install(|| commands::execute(cmd)),
        None => commands::execute(cmd),
    }
}

fn report_error(e: &CliError) {
    tracing::error!(kind = e.kind, code = e.code, "{}", e.message);
    eprintln!("{}", e.to_json());
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let e = CliError::usage(e.to_string().trim_end());
            eprintln!("{}", e.to_json());
            return e.code;
        }
    };
    let builder = tracing_subscriber::fmt().with_writer(std::io::stderr).with_ansi(false);
    let dispatch = if cli.json_logs {
        tracing::Dispatch::new(builder.json().finish())
    } else {
        tracing::Dispatch::new(builder.finish())
    };
    tracing::dispatcher::with_default(&dispatch, || match run_parsed(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(&e);
            e.code
        }
    })
}

fn run_parsed(cli: Cli) -> Result<(), CliError> {
    let mut cmd = cli.command;
    cmd.resolve();
    if let Command::Replay(a) = &cmd {
        return manifest::replay(a);
    }
    let started = Instant::now();
    let outcome = execute(&cmd, cli.threads)?;
    for a in &outcome.outputs {
        match &a.path {
            Some(p) => std::fs::write(p, &a.bytes)
                .map_err(|e| CliError::usage(format!("cannot write {}: {e}", p.display())))?,
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(&a.bytes).and_then(|_| out.flush()).map_err(|e| CliError::usage(e.to_string()))?;
            }
        }
    }
    let m = RunManifest::new(cmd, cli.threads, &outcome, started.elapsed().as_secs_f64());
    let target = cli.manifest.clone().or_else(|| {
        outcome.outputs.iter().find_map(|a| a.path.as_ref()).map(|p| manifest::default_path(p))
    });
    let json = m.to_json();
    match target {
        Some(p) => {
            std::fs::write(&p, json + "\n")
                .map_err(|e| CliError::usage(format!("cannot write {}: {e}", p.display())))?;
            tracing::info!(manifest = %p.display(), "run complete");
        }
        None => eprintln!("{}", serde_json::to_string(&m).unwrap_or_default()),
    }
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
