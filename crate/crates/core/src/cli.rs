//! The `caol` command line: argument parsing, run configs, and CSV/JSON reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure,
//! 5 validation failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bounds::{mismatch_from_codes, BoundReport};
use crate::conv::build_lifts;
use crate::error::{CaolError, ErrorClass, Result};
use crate::ingest::{
    load_dataset, load_raw_tensor, matrix_to_signal, signal_to_matrix, write_atomic, write_raw_tensor, DatasetManifest,
};
use crate::procrustes::FilterBank;
use crate::signal::{Geometry, OffsetPattern, Signal};
use crate::synth::{
    chi_track, loglog_slope, monte_carlo_expected, monte_carlo_hp, population_stats, rho_scan, synth_instance,
    verify_det_bound_perturbed, MismatchModel, SignalModel, SynthSpec, VerifyReport, DEFAULT_CHI_STRIDE,
    DEFAULT_SCAN_REPLICATES,
};
use crate::train::{caol_train, sparse_code_update_all, TrainConfig, TrainTrace};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;

const SCAN_HELP: &str = "\
Output tables (comma separated, '.' decimal, header row, one leading '#' metadata line):
  rho_scan.csv   L,rho_sq,rho_sq_std,replicates
  chi_track.csv  iteration,chi_bar
Plot rho_sq against L on log-log axes, chi_bar against iteration.
gnuplot: set datafile separator ','; plot 'rho_scan.csv' using 1:2 skip 2";

#[derive(Debug, Parser)]
#[command(name = "caol", version, about = "Learn orthogonal convolutional filters and check filter-error bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a filter bank on a dataset manifest.
    Train(TrainArgs),
    /// Compute every bound for a saved run or a synthetic instance.
    Bounds(BoundsArgs),
    /// Monte Carlo validation of the bounds on synthetic instances.
    Verify(VerifyArgs),
    /// Emit plot tables: rho^2 against L, or chi_bar along a training run.
    #[command(after_help = SCAN_HELP)]
    Scan(ScanArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// KxR (K filters of R taps) for line data, HxW window for grid data.
    #[arg(long)]
    pub filters: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub record_every: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Rerun from an emitted config.json.
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalArg {
    Gaussian,
    Impulse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MismatchArg {
    Zero,
    IidGaussian,
    BoundedBall,
    Correlated,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub r: usize,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 32)]
    pub l: usize,
    #[arg(long, value_enum, default_value_t = SignalArg::Gaussian)]
    pub signals: SignalArg,
    /// Draw signals from this manifest instead of a synthetic model.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MismatchArg::IidGaussian)]
    pub mismatch: MismatchArg,
    /// Standard deviation, ball radius, or correlation strength c.
    #[arg(long, default_value_t = 0.1)]
    pub mismatch_scale: f64,
    /// Bounded-ball noise added to the correlated model.
    #[arg(long, default_value_t = 0.0)]
    pub noise_radius: f64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BoundsArgs {
    /// Directory of a `train` run.
    #[arg(long, conflicts_with = "synthetic")]
    pub run: Option<PathBuf>,
    /// Manifest for the run's data; defaults to the one in the run config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use a synthetic instance described by the synthetic flags.
    #[arg(long)]
    pub synthetic: bool,
    #[command(flatten)]
    pub spec: SynthArgs,
    /// Deviations for the high-probability bound.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    /// Deterministic bound on every trial (default when no check is named).
    #[arg(long)]
    pub thm1: bool,
    /// Expected bound against the mean error.
    #[arg(long)]
    pub cor1: bool,
    /// High-probability bound coverage.
    #[arg(long)]
    pub thm2: bool,
    #[command(flatten)]
    pub spec: SynthArgs,
    /// Deviation for the coverage check; defaults to half the admissible maximum.
    #[arg(long, allow_hyphen_values = true)]
    pub delta: Option<f64>,
    #[arg(long, hide = true, allow_hyphen_values = true)]
    pub perturb_bound: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    Rho,
    Chi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanSource {
    Impulse,
    Gaussian,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScanArgs {
    pub mode: ScanMode,
    /// Manifest to scan (rho), or to override the run's data (chi).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generated dataset for rho scans, instead of a manifest.
    #[arg(long, value_enum, conflicts_with = "data")]
    pub source: Option<ScanSource>,
    /// Signal length of a generated dataset.
    #[arg(long, default_value_t = 256)]
    pub n: usize,
    /// Number of signals in a generated dataset.
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    /// Filter size R (a perfect square for grid data).
    #[arg(long, default_value_t = 8)]
    pub r: usize,
    /// Sample counts; defaults to powers of two up to the dataset size.
    #[arg(long, value_delimiter = ',')]
    pub l_grid: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_SCAN_REPLICATES)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory of a `train` run (chi).
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CHI_STRIDE)]
    pub stride: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum CommandConfig {
    Train(TrainArgs),
    Bounds(BoundsArgs),
    Verify(VerifyArgs),
    Scan(ScanArgs),
}

/// Everything needed to rerun a command. Written as `config.json` in every output
/// directory and embedded in every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: String,
    pub command: CommandConfig,
    pub manifest: Option<DatasetManifest>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub formats: Vec<String>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CaolError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_slice(&bytes).map_err(|e| CaolError::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

enum Outcome {
    Ok,
    ValidationFailed(String),
}

/// Runs the command line in-process and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error [report]: {e}");
        return EXIT_CONFIG;
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Scan(a) => cmd_scan(a),
    };
    match result {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::ValidationFailed(msg)) => {
            eprintln!("validation failed [synth]: {msg}");
            EXIT_VALIDATION
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &CaolError) -> i32 {
    match e.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numerical => EXIT_NUMERICAL,
    }
}

/// Caps the global thread pool from `CAOL_THREADS` (0 or unset means automatic).
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("CAOL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CaolError::InvalidConfig(format!("CAOL_THREADS must be a count, got '{v}'")))?;
    if n > 0 {
        // A pool that is already built (repeated in-process runs) keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_replay(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::read(path)?;
    if cfg.version != VERSION {
        log::warn!("replaying a config from version {} with {}", cfg.version, VERSION);
    }
    Ok(cfg)
}

fn wrong_command(path: &Path, want: &str) -> CaolError {
    CaolError::InvalidConfig(format!("{} is not a '{want}' config", path.display()))
}

fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    let out = out
        .clone()
        .ok_or_else(|| CaolError::InvalidConfig("--out <dir> is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| CaolError::io(format!("creating {}", out.display()), e))?;
    Ok(out)
}

fn existing(flag: &str, path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|_| CaolError::InvalidConfig(format!("{flag}: {} does not exist", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(&dir.join(name), text.as_bytes())
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with one `#` metadata line carrying the version, seed and compact config.
fn write_csv(dir: &Path, name: &str, config: &RunConfig, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let to_io = |e: csv::Error| CaolError::io(format!("encoding {name}"), std::io::Error::other(e));
    let mut out = format!(
        "# caol {} seed={} config={}\n",
        config.version,
        config.seed,
        serde_json::to_string(config)?
    )
    .into_bytes();
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
        w.write_record(header).map_err(to_io)?;
        for row in rows {
            w.write_record(row).map_err(to_io)?;
        }
        w.flush().map_err(|e| CaolError::io(format!("encoding {name}"), e))?;
    }
    write_atomic(&dir.join(name), &out)
}

/// Reads a CSV written by this tool, skipping the metadata line.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let to_err = |e: csv::Error| CaolError::io(format!("reading {}", path.display()), std::io::Error::other(e));
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(to_err)?;
    let header = r.headers().map_err(to_err)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(to_err)?;
    Ok((header, rows))
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

/// Offset pattern and filter count for `--filters` on data of `geometry`.
pub fn filter_shape(geometry: Geometry, filters: &str) -> Result<(OffsetPattern, usize)> {
    let bad = || CaolError::InvalidConfig(format!("--filters must look like AxB, got '{filters}'"));
    let (a, b) = filters.split_once(['x', 'X']).ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    match geometry {
        Geometry::Line { .. } => Ok((OffsetPattern::line(b)?, a)),
        Geometry::Grid { .. } => Ok((OffsetPattern::window(a, b)?, a * b)),
    }
}

fn common_geometry(signals: &[Signal]) -> Result<Geometry> {
    let g = signals.first().ok_or(CaolError::EmptyDataset("dataset"))?.geometry();
    if signals.iter().any(|s| s.geometry() != g) {
        return Err(CaolError::InvalidSignal("dataset signals differ in geometry".into()));
    }
    Ok(g)
}

#[derive(Serialize)]
struct TrainSummary {
    samples: usize,
    geometry: Geometry,
    r: usize,
    k: usize,
    iterations: usize,
    converged: bool,
    initial_objective: f64,
    final_objective: f64,
    final_sparsity: f64,
    max_relative_increase: f64,
    patches: bool,
}

fn cmd_train(args: TrainArgs) -> Result<Outcome> {
    let mut args = match &args.replay {
        Some(path) => match load_replay(path)?.command {
            CommandConfig::Train(mut a) => {
                a.out = args.out.clone().or(a.out);
                a
            }
            _ => return Err(wrong_command(path, "train")),
        },
        None => args,
    };
    let data = args
        .data
        .clone()
        .ok_or_else(|| CaolError::InvalidConfig("--data <manifest> is required".into()))?;
    let data = existing("--data", &data)?;
    args.data = Some(data.clone());
    let filters = args
        .filters
        .clone()
        .ok_or_else(|| CaolError::InvalidConfig("--filters is required".into()))?;
    let config = TrainConfig {
        alpha: args.alpha,
        max_iters: args.iters,
        rel_tol: args.rel_tol,
        seed: args.seed,
        record_every: args.record_every,
    };
    config.validate()?;
    let out = out_dir(&args.out)?;
    let dataset = load_dataset(&data)?;
    let geometry = common_geometry(&dataset.signals)?;
    let (pattern, k) = filter_shape(geometry, &filters)?;
    pattern.validate_for(geometry)?;

    let run_config = RunConfig {
        version: VERSION.into(),
        command: CommandConfig::Train(args.clone()),
        manifest: Some(dataset.manifest.clone()),
        output_dir: out.clone(),
        seed: args.seed,
        formats: vec!["csv".into(), "json".into(), "tnsr".into()],
    };
    write_json(&out, "config.json", &run_config)?;

    log::info!("training {} signals, R = {}, K = {k}", dataset.signals.len(), pattern.len());
    let result = caol_train(&dataset.signals, &pattern, k, &config, None)?;
    let trace = &result.trace;
    let last = trace.snapshots.last().expect("a run records its final iteration");

    write_raw_tensor(&out.join("filters.tnsr"), &matrix_to_signal(result.filters.matrix())?)?;
    write_raw_tensor(&out.join("code_filters.tnsr"), &matrix_to_signal(last.code_filters.matrix())?)?;
    let rows: Vec<Vec<String>> = trace
        .stats
        .iter()
        .map(|s| vec![s.iteration.to_string(), fmt_f64(s.objective), fmt_f64(s.sparsity)])
        .collect();
    write_csv(&out, "trace.csv", &run_config, &["iteration", "objective", "sparsity"], &rows)?;
    write_json(&out, "snapshots.json", &Report { config: &run_config, body: trace })?;
    let summary = TrainSummary {
        samples: dataset.signals.len(),
        geometry,
        r: pattern.len(),
        k,
        iterations: trace.iterations(),
        converged: trace.converged,
        initial_objective: trace.stats[0].objective,
        final_objective: trace.stats.last().unwrap().objective,
        final_sparsity: trace.stats.last().unwrap().sparsity,
        max_relative_increase: trace.max_relative_increase(),
        patches: dataset.manifest.patches.is_some(),
    };
    write_json(&out, "summary.json", &Report { config: &run_config, body: summary })?;
    Ok(Outcome::Ok)
}

impl SynthArgs {
    pub fn to_spec(&self) -> Result<SynthSpec> {
        let s = self.mismatch_scale;
        let mismatch = match self.mismatch {
            MismatchArg::Zero => MismatchModel::Zero,
            MismatchArg::IidGaussian => MismatchModel::IidGaussian { std: s },
            MismatchArg::BoundedBall => MismatchModel::BoundedBall { radius: s },
            MismatchArg::Correlated => MismatchModel::Correlated {
                c: s,
                noise_radius: self.noise_radius,
            },
        };
        let mut spec = SynthSpec::new(self.n, self.r, self.k, self.l)
            .mismatch(mismatch)
            .seed(self.seed)
            .trials(self.trials)
            .signals(match self.signals {
                SignalArg::Gaussian => SignalModel::Gaussian,
                SignalArg::Impulse => SignalModel::Impulse,
            });
        if let Some(pool) = &self.pool {
            spec = spec.dataset(load_dataset(&existing("--pool", pool)?)?.signals);
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn run_manifest(path: &Path) -> Result<(RunConfig, TrainArgs)> {
    let cfg = RunConfig::read(&path.join("config.json"))?;
    match cfg.command.clone() {
        CommandConfig::Train(a) => Ok((cfg, a)),
        _ => Err(wrong_command(&path.join("config.json"), "train")),
    }
}

/// Signals, pattern and filter count of a saved training run.
fn load_run_data(run: &Path, data: Option<&Path>) -> Result<(Vec<Signal>, OffsetPattern, usize, TrainArgs)> {
    let (_, train) = run_manifest(run)?;
    let data = match data {
        Some(d) => existing("--data", d)?,
        None => train
            .data
            .clone()
            .ok_or_else(|| CaolError::InvalidConfig("run config has no data path; pass --data".into()))?,
    };
    let dataset = load_dataset(&data)?;
    let geometry = common_geometry(&dataset.signals)?;
    let filters = train.filters.clone().unwrap_or_default();
    let (pattern, k) = filter_shape(geometry, &filters)?;
    Ok((dataset.signals, pattern, k, train))
}

fn load_bank(path: &Path) -> Result<FilterBank> {
    FilterBank::new(signal_to_matrix(&load_raw_tensor(path)?)?)
}

fn bound_rows(report: &BoundReport) -> Vec<Vec<String>> {
    let d = &report.diagnostics;
    let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_f64);
    let mut rows = vec![
        vec!["samples".into(), report.samples.to_string()],
        vec!["det_bound".into(), fmt_f64(report.det_bound)],
        vec!["numerator".into(), fmt_f64(report.numerator)],
        vec!["lambda_min".into(), fmt_f64(report.lambda_min)],
        vec!["rho_sq".into(), fmt_f64(report.rho_sq)],
        vec!["sigma_bar_sq".into(), fmt_f64(report.sigma_bar_sq)],
        vec!["expected_bound".into(), fmt_f64(report.expected_bound)],
        vec!["rho_bar".into(), fmt_f64(report.rho_bar)],
        vec!["chi_bar".into(), fmt_f64(report.chi_bar)],
        vec!["gram_lambda_min".into(), fmt_f64(d.gram_lambda_min)],
        vec!["gram_lambda_max".into(), fmt_f64(d.gram_lambda_max)],
        vec!["cross_sigma_max".into(), opt(d.cross_sigma_max)],
        vec!["cross_sigma_r".into(), opt(d.cross_sigma_r)],
        vec!["full_rank".into(), d.full_rank.to_string()],
        vec!["ensemble_estimated".into(), report.ensemble_estimated.to_string()],
    ];
    for (i, hp) in report.hp.iter().enumerate() {
        rows.push(vec![format!("hp.{i}.delta"), fmt_f64(hp.delta)]);
        rows.push(vec![format!("hp.{i}.bound"), fmt_f64(hp.bound)]);
        rows.push(vec![format!("hp.{i}.prob"), fmt_f64(hp.prob)]);
        rows.push(vec![format!("hp.{i}.vacuous"), hp.vacuous.to_string()]);
    }
    rows
}

fn cmd_bounds(args: BoundsArgs) -> Result<Outcome> {
    let args = match &args.replay {
        Some(path) => match load_replay(path)?.command {
            CommandConfig::Bounds(mut a) => {
                a.out = args.out.clone().or(a.out);
                a
            }
            _ => return Err(wrong_command(path, "bounds")),
        },
        None => args,
    };
    let mut args = args;
    if let Some(run) = &args.run {
        args.run = Some(existing("--run", run)?);
    }
    if let Some(d) = &args.data {
        args.data = Some(existing("--data", d)?);
    }
    let out = out_dir(&args.out)?;
    let (report, manifest, seed) = match (&args.run, args.synthetic) {
        (Some(run), false) => {
            let (signals, pattern, _, train) = load_run_data(run, args.data.as_deref())?;
            let lifts = build_lifts(&signals, &pattern)?;
            let d_ref = load_bank(&run.join("filters.tnsr"))?;
            let code_filters = load_bank(&run.join("code_filters.tnsr"))?;
            let codes = sparse_code_update_all(&code_filters, &lifts, train.alpha)?;
            let mismatches = mismatch_from_codes(&codes, &lifts, d_ref.matrix())?;
            let report = BoundReport::compute(&lifts, &mismatches, Some(&codes), None, &args.delta)?;
            let manifest = run_manifest(run)?.0.manifest;
            (report, manifest, train.seed)
        }
        (None, true) => {
            let spec = args.spec.to_spec()?;
            let inst = synth_instance(&spec)?;
            let stats = population_stats(&spec)?;
            let mut report =
                BoundReport::compute(&inst.lifts, &inst.mismatches, Some(&inst.codes), Some(&stats), &args.delta)?;
            report.ensemble_estimated = stats.estimated;
            (report, None, spec.seed)
        }
        _ => return Err(CaolError::InvalidConfig("bounds needs exactly one of --run <dir> or --synthetic".into())),
    };
    let config = RunConfig {
        version: VERSION.into(),
        command: CommandConfig::Bounds(args),
        manifest,
        output_dir: out.clone(),
        seed,
        formats: vec!["csv".into(), "json".into()],
    };
    write_json(&out, "config.json", &config)?;
    write_json(&out, "bounds.json", &Report { config: &config, body: &report })?;
    write_csv(&out, "bounds.csv", &config, &["quantity", "value"], &bound_rows(&report))?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct VerifyBody<'a> {
    reports: &'a [VerifyReport],
    passed: bool,
}

#[derive(Serialize)]
struct FailingTrial<'a> {
    config: &'a RunConfig,
    spec: &'a SynthSpec,
    check: crate::synth::Check,
    trial: crate::synth::TrialResult,
    /// Replay with `caol verify --replay config.json`; the trial index selects the
    /// random stream.
    stream: u64,
}

fn cmd_verify(args: VerifyArgs) -> Result<Outcome> {
    let mut args = match &args.replay {
        Some(path) => match load_replay(path)?.command {
            CommandConfig::Verify(mut a) => {
                a.out = args.out.clone().or(a.out);
                a
            }
            _ => return Err(wrong_command(path, "verify")),
        },
        None => args,
    };
    if let Some(pool) = &args.spec.pool {
        args.spec.pool = Some(existing("--pool", pool)?);
    }
    let spec = args.spec.to_spec()?;
    let out = out_dir(&args.out)?;
    let config = RunConfig {
        version: VERSION.into(),
        command: CommandConfig::Verify(args.clone()),
        manifest: None,
        output_dir: out.clone(),
        seed: spec.seed,
        formats: vec!["csv".into(), "json".into()],
    };
    write_json(&out, "config.json", &config)?;

    let thm1 = args.thm1 || !(args.cor1 || args.thm2);
    let mut reports = Vec::new();
    if thm1 {
        log::info!("deterministic bound, {}", spec.label());
        reports.push(verify_det_bound_perturbed(&spec, args.perturb_bound)?);
    }
    if args.cor1 {
        log::info!("expected bound, {}", spec.label());
        reports.push(monte_carlo_expected(&spec)?);
    }
    if args.thm2 {
        let delta = match args.delta {
            Some(d) => d,
            None => population_stats(&spec)?.delta_upper()? / 2.0,
        };
        log::info!("high-probability bound at delta = {delta}, {}", spec.label());
        reports.push(monte_carlo_hp(&spec, delta)?);
    }
    let passed = reports.iter().all(|r| r.passed);
    write_json(&out, "verify.json", &Report {
        config: &config,
        body: VerifyBody { reports: &reports, passed },
    })?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .flat_map(|rep| {
            let check = serde_json::to_value(rep.check).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            rep.trials.iter().map(move |t| {
                vec![
                    check.clone(),
                    t.trial.to_string(),
                    fmt_f64(t.error),
                    fmt_f64(t.bound),
                    t.holds.to_string(),
                    fmt_f64(t.ratio),
                    fmt_f64(t.det_bound),
                ]
            })
        })
        .collect();
    write_csv(&out, "verify.csv", &config, &["check", "trial", "error", "bound", "holds", "ratio", "det_bound"], &rows)?;

    if passed {
        return Ok(Outcome::Ok);
    }
    let failed = reports.iter().find(|r| !r.passed).unwrap();
    let trial = failed.first_failure().or(failed.trials.first()).copied().unwrap();
    write_json(&out, "failing_trial.json", &FailingTrial {
        config: &config,
        spec: &spec,
        check: failed.check,
        trial,
        stream: trial.trial as u64 + 1,
    })?;
    Ok(Outcome::ValidationFailed(format!(
        "{:?} check failed (trial {}, error {:e}, bound {:e}); see failing_trial.json",
        failed.check, trial.trial, trial.error, trial.bound
    )))
}

fn default_l_grid(count: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = std::iter::successors(Some(1usize), |l| l.checked_mul(2))
        .take_while(|&l| l <= count)
        .collect();
    if *grid.last().unwrap() != count {
        grid.push(count);
    }
    grid
}

#[derive(Serialize)]
struct RhoSummary<'a> {
    rows: &'a [crate::synth::RhoRow],
    loglog_slope: f64,
}

fn cmd_scan(args: ScanArgs) -> Result<Outcome> {
    let mut args = match &args.replay {
        Some(path) => match load_replay(path)?.command {
            CommandConfig::Scan(mut a) => {
                a.out = args.out.clone().or(a.out);
                a
            }
            _ => return Err(wrong_command(path, "scan")),
        },
        None => args,
    };
    if let Some(d) = &args.data {
        args.data = Some(existing("--data", d)?);
    }
    if let Some(run) = &args.run {
        args.run = Some(existing("--run", run)?);
    }
    let out = out_dir(&args.out)?;
    match args.mode {
        ScanMode::Rho => {
            let (signals, manifest) = match (&args.data, args.source) {
                (Some(d), None) => {
                    let ds = load_dataset(d)?;
                    (ds.signals, Some(ds.manifest))
                }
                (None, Some(src)) => {
                    let spec = SynthSpec::new(args.n, args.r, args.r, 1).seed(args.seed).signals(match src {
                        ScanSource::Impulse => SignalModel::Impulse,
                        ScanSource::Gaussian => SignalModel::Gaussian,
                    });
                    (generated_signals(&spec, args.count)?, None)
                }
                _ => return Err(CaolError::InvalidConfig("rho scan needs --data or --source".into())),
            };
            let geometry = common_geometry(&signals)?;
            let pattern = OffsetPattern::canonical(geometry, args.r)?;
            let grid = if args.l_grid.is_empty() {
                default_l_grid(signals.len())
            } else {
                args.l_grid.clone()
            };
            let rows = rho_scan(&signals, &pattern, &grid, args.replicates, args.seed)?;
            let config = RunConfig {
                version: VERSION.into(),
                command: CommandConfig::Scan(args.clone()),
                manifest,
                output_dir: out.clone(),
                seed: args.seed,
                formats: vec!["csv".into(), "json".into()],
            };
            write_json(&out, "config.json", &config)?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![r.l.to_string(), fmt_f64(r.rho_sq_mean), fmt_f64(r.rho_sq_std), r.replicates.to_string()])
                .collect();
            write_csv(&out, "rho_scan.csv", &config, &["L", "rho_sq", "rho_sq_std", "replicates"], &table)?;
            let slope = if rows.len() > 1 { loglog_slope(&rows) } else { f64::NAN };
            write_json(&out, "rho_scan.json", &Report {
                config: &config,
                body: RhoSummary { rows: &rows, loglog_slope: slope },
            })?;
        }
        ScanMode::Chi => {
            let run = args
                .run
                .clone()
                .ok_or_else(|| CaolError::InvalidConfig("chi scan needs --run <dir>".into()))?;
            let (signals, pattern, _, train) = load_run_data(&run, args.data.as_deref())?;
            let lifts = build_lifts(&signals, &pattern)?;
            let trace = load_trace(&run.join("snapshots.json"))?;
            let d_ref = load_bank(&run.join("filters.tnsr"))?;
            let rows = chi_track(&trace, &lifts, d_ref.matrix(), args.stride)?;
            let config = RunConfig {
                version: VERSION.into(),
                command: CommandConfig::Scan(args.clone()),
                manifest: run_manifest(&run)?.0.manifest,
                output_dir: out.clone(),
                seed: train.seed,
                formats: vec!["csv".into()],
            };
            write_json(&out, "config.json", &config)?;
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![r.iteration.to_string(), fmt_f64(r.chi_bar)])
                .collect();
            write_csv(&out, "chi_track.csv", &config, &["iteration", "chi_bar"], &table)?;
        }
    }
    Ok(Outcome::Ok)
}

fn generated_signals(spec: &SynthSpec, count: usize) -> Result<Vec<Signal>> {
    if count == 0 {
        return Err(CaolError::InvalidConfig("--count must be >= 1".into()));
    }
    let spec = SynthSpec { l: count, ..spec.clone() };
    match spec.signal_model {
        // Impulses at distinct positions cycling through the signal.
        SignalModel::Impulse => (0..count).map(|i| Signal::impulse(spec.n, i % spec.n)).collect(),
        _ => {
            let mut spec = spec;
            spec.mismatch_model = MismatchModel::Zero;
            Ok(synth_instance(&spec)?.signals)
        }
    }
}

#[derive(Deserialize)]
struct TraceFile {
    #[serde(flatten)]
    trace: TrainTrace,
}

pub fn load_trace(path: &Path) -> Result<TrainTrace> {
    let bytes = fs::read(path).map_err(|e| CaolError::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_slice::<TraceFile>(&bytes)?.trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_shapes() {
        let (p, k) = filter_shape(Geometry::Line { n: 10 }, "6x4").unwrap();
        assert_eq!((p.len(), k), (4, 6));
        let (p, k) = filter_shape(Geometry::Grid { h: 10, w: 10 }, "5x5").unwrap();
        assert_eq!((p.len(), k), (25, 25));
        assert!(filter_shape(Geometry::Line { n: 10 }, "64").is_err());
    }

    #[test]
    fn l_grid_defaults() {
        assert_eq!(default_l_grid(8), vec![1, 2, 4, 8]);
        assert_eq!(default_l_grid(10), vec![1, 2, 4, 8, 10]);
    }

    #[test]
    fn floats_keep_17_digits() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
