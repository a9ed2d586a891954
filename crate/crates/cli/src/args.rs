//! Flag parsing, config files and validation.
//!
//! A config file holds `key = value` lines; keys are the long flag names
//! with `-` or `_` separators (`ts_count = 30`). Flags given on the command
//! line override the file.

use std::path::{Path, PathBuf};

use clap::Parser;
use thiserror::Error;

use ptrace_core::driver::{Mode, OutputTimes};
use ptrace_core::output::ProtocolKind;
use ptrace_core::scenarios::ScenarioKind;
use ptrace_core::scheduler::ScheduleSpec;
use ptrace_core::tracking::WeakSinkPolicy;

use crate::bench::BenchMatrix;

/// Keys accepted in config files.
pub const CONFIG_KEYS: &[&str] = &[
    "scenario",
    "mode",
    "np",
    "threads",
    "schedule",
    "chunk",
    "protocol",
    "ts-count",
    "sigma2",
    "seed",
    "scale",
    "refine",
    "weak-sink",
    "out-dir",
    "emit-flow",
    "flow-in",
    "output-times",
    "stop-time",
    "no-wells",
];

#[derive(Parser, Debug, Default, Clone)]
#[command(
    name = "ptrace",
    version,
    about = "Parallel semi-analytical particle tracking on synthetic aquifers",
    args_override_self = true
)]
pub struct Cli {
    /// `key = value` file with defaults for any flag below.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Test case: tc1 (heterogeneous 2D) or tc2 (three-layer with sinks).
    #[arg(long)]
    pub scenario: Option<ScenarioKind>,
    /// endpoint, timeseries or pathline.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Number of particles.
    #[arg(long)]
    pub np: Option<usize>,
    /// Worker threads for the particle loop.
    #[arg(long)]
    pub threads: Option<usize>,
    /// static or dynamic.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Particles claimed at a time under the dynamic schedule.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// critical_single, consolidated or parallel_exclusive.
    #[arg(long)]
    pub protocol: Option<ProtocolKind>,
    /// Number of equispaced output times.
    #[arg(long)]
    pub ts_count: Option<usize>,
    /// Log-conductivity variance (tc1).
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Random seed for the conductivity field.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Domain scale factor in (0, 1].
    #[arg(long)]
    pub scale: Option<f64>,
    /// Horizontal refinement factor (tc2).
    #[arg(long)]
    pub refine: Option<usize>,
    /// pass_through or stop.
    #[arg(long)]
    pub weak_sink: Option<WeakSinkPolicy>,
    /// Directory for output files.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Run a benchmark matrix file, or `default` for the desk-scale sweep.
    #[arg(long, value_name = "MATRIX")]
    pub bench: Option<String>,
    /// Timed repetitions per benchmark cell.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Untimed warm-up runs per benchmark cell.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Write the solved flow snapshot to this file.
    #[arg(long, value_name = "PATH")]
    pub emit_flow: Option<PathBuf>,
    /// Read the flow snapshot from this file instead of solving.
    #[arg(long, value_name = "PATH")]
    pub flow_in: Option<PathBuf>,
    /// Explicit comma-separated output times (d).
    #[arg(long, value_name = "T1,T2,...")]
    pub output_times: Option<String>,
    /// Simulation stop time (d).
    #[arg(long)]
    pub stop_time: Option<f64>,
    /// Disable the tc2 pumping wells.
    #[arg(long)]
    pub no_wells: bool,
    /// Only render the report tables from an existing benchmark CSV.
    #[arg(long, value_name = "CSV")]
    pub report_from: Option<PathBuf>,
    /// Report path (default: next to the CSV).
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Help, version or a flag syntax error reported by the parser.
    #[error("{0}")]
    Clap(#[from] clap::Error),
    #[error("usage: {0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Clap(e) => e.exit_code(),
            CliError::Usage(_) => 2,
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

/// Scenario coordinates shared by single runs and benchmark cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioParams {
    pub kind: ScenarioKind,
    pub np: usize,
    pub sigma2: f64,
    pub seed: u64,
    pub scale: f64,
    pub refine: usize,
    pub ts_count: usize,
    pub wells: bool,
}

impl ScenarioParams {
    pub fn default_for(kind: ScenarioKind) -> Self {
        ScenarioParams {
            kind,
            np: 10_000,
            sigma2: match kind {
                ScenarioKind::Tc1 => 2.5,
                ScenarioKind::Tc2 => 0.0,
            },
            seed: 1,
            scale: match kind {
                ScenarioKind::Tc1 => 0.2,
                ScenarioKind::Tc2 => 1.0,
            },
            refine: 1,
            ts_count: 5,
            wells: true,
        }
    }
}

/// A validated single simulation request.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRequest {
    pub params: ScenarioParams,
    pub mode: Mode,
    pub workers: usize,
    pub schedule: ScheduleSpec,
    pub protocol: ProtocolKind,
    pub weak_sink: Option<WeakSinkPolicy>,
    pub out_dir: PathBuf,
    pub output_times: Option<OutputTimes>,
    pub stop_time: Option<f64>,
    pub emit_flow: Option<PathBuf>,
    pub flow_in: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRequest {
    pub matrix: BenchMatrix,
    pub out_dir: PathBuf,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Run(RunRequest),
    Bench(BenchRequest),
    Report { csv: PathBuf, out: Option<PathBuf> },
}

/// Parses the command line (first item is the program name), merging a
/// `--config` file underneath the flags.
pub fn parse_args<I, T>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let first = Cli::try_parse_from(&argv)?;
    let cli = match &first.config {
        Some(path) => {
            let mut merged = vec![argv.first().cloned().unwrap_or_else(|| "ptrace".into())];
            merged.extend(config_tokens(path)?.into_iter().map(Into::into));
            merged.extend(argv.iter().skip(1).cloned());
            Cli::try_parse_from(merged)?
        }
        None => first,
    };
    validate(cli)
}

/// Turns a config file into flag tokens.
pub fn config_tokens(path: &Path) -> Result<Vec<String>, CliError> {
    let text =
        std::fs::read_to_string(path).or_else(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut tokens = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return usage(format!("{}:{}: expected `key = value`", path.display(), n + 1));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return usage(format!("{}:{}: unknown key `{key}`", path.display(), n + 1));
        }
        if key == "no-wells" {
            match value {
                "true" => tokens.push("--no-wells".to_string()),
                "false" => {}
                _ => return usage(format!("{}:{}: no_wells must be true or false", path.display(), n + 1)),
            }
        } else {
            tokens.push(format!("--{key}"));
            tokens.push(value.to_string());
        }
    }
    Ok(tokens)
}

/// Schedule from `--schedule` and `--chunk`.
pub fn schedule_from(schedule: Option<&str>, chunk: Option<usize>) -> Result<ScheduleSpec, CliError> {
    let base: ScheduleSpec = match schedule {
        Some(s) => s.parse().or_else(|e: String| usage(e))?,
        None => ScheduleSpec::Static,
    };
    match (base, chunk) {
        (_, Some(0)) => usage("--chunk must be at least 1"),
        (ScheduleSpec::Static, Some(_)) => usage("--chunk only applies to the dynamic schedule"),
        (ScheduleSpec::Dynamic { .. }, Some(c)) => Ok(ScheduleSpec::Dynamic { chunk: c }),
        (s, None) => Ok(s),
    }
}

/// Checks a mode/protocol pair.
pub fn check_protocol(mode: Mode, protocol: ProtocolKind, explicit: bool) -> Result<(), CliError> {
    match mode {
        Mode::Endpoint if explicit && protocol == ProtocolKind::Consolidated => {
            usage("--protocol consolidated needs timeseries output, not --mode endpoint")
        }
        Mode::Pathline if protocol != ProtocolKind::ParallelExclusive => {
            usage("pathline output supports only --protocol parallel_exclusive")
        }
        _ => Ok(()),
    }
}

pub fn parse_times(list: &str) -> Result<Vec<f64>, CliError> {
    list.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .or_else(|_| usage(format!("bad output time `{}`", t.trim())))
        })
        .collect()
}

fn check_params(p: &ScenarioParams) -> Result<(), CliError> {
    if !(0.0..=5.0).contains(&p.sigma2) {
        return usage(format!("--sigma2 {} outside [0, 5]", p.sigma2));
    }
    if !(p.scale > 0.0 && p.scale <= 1.0) {
        return usage(format!("--scale {} outside (0, 1]", p.scale));
    }
    if p.refine == 0 {
        return usage("--refine must be at least 1");
    }
    if p.ts_count == 0 {
        return usage("--ts-count must be at least 1");
    }
    if p.np == 0 {
        return usage("--np must be at least 1");
    }
    Ok(())
}

fn validate(cli: Cli) -> Result<Command, CliError> {
    if cli.threads == Some(0) {
        return usage("--threads must be at least 1");
    }
    if cli.reps == Some(0) {
        return usage("--reps must be at least 1");
    }
    if let Some(csv) = cli.report_from {
        return Ok(Command::Report { csv, out: cli.report });
    }
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("ptrace-out"));
    if let Some(m) = &cli.bench {
        let mut matrix = if m == "default" {
            BenchMatrix::desk_default()
        } else {
            BenchMatrix::from_file(Path::new(m))?
        };
        if let Some(r) = cli.reps {
            matrix.reps = r;
        }
        if let Some(w) = cli.warmup {
            matrix.warmup = w;
        }
        matrix.validate()?;
        return Ok(Command::Bench(BenchRequest {
            matrix,
            out_dir,
            report: cli.report,
        }));
    }

    let Some(kind) = cli.scenario else {
        return usage("--scenario tc1|tc2 is required (or --bench / --report-from)");
    };
    let mut params = ScenarioParams::default_for(kind);
    params.np = cli.np.unwrap_or(params.np);
    params.sigma2 = cli.sigma2.unwrap_or(params.sigma2);
    params.seed = cli.seed.unwrap_or(params.seed);
    params.scale = cli.scale.unwrap_or(params.scale);
    params.refine = cli.refine.unwrap_or(params.refine);
    params.ts_count = cli.ts_count.unwrap_or(params.ts_count);
    params.wells = !cli.no_wells;
    check_params(&params)?;
    if kind == ScenarioKind::Tc1 && cli.refine.is_some_and(|r| r != 1) {
        return usage("--refine applies to tc2 only");
    }
    if kind == ScenarioKind::Tc2 && cli.sigma2.is_some() {
        return usage("--sigma2 applies to tc1 only");
    }
    let mode = cli.mode.unwrap_or(match kind {
        ScenarioKind::Tc1 => Mode::Endpoint,
        ScenarioKind::Tc2 => Mode::Timeseries,
    });
    let protocol = cli.protocol.unwrap_or(ProtocolKind::ParallelExclusive);
    check_protocol(mode, protocol, cli.protocol.is_some())?;
    let schedule = schedule_from(cli.schedule.as_deref(), cli.chunk)?;
    let output_times = match &cli.output_times {
        Some(list) => Some(OutputTimes::Explicit(parse_times(list)?)),
        None => None,
    };
    if output_times.is_some() && mode != Mode::Timeseries {
        return usage("--output-times needs --mode timeseries");
    }
    if let Some(t) = cli.stop_time {
        if !(t >= 0.0) {
            return usage("--stop-time must be >= 0");
        }
    }
    Ok(Command::Run(RunRequest {
        params,
        mode,
        workers: cli.threads.unwrap_or(1),
        schedule,
        protocol,
        weak_sink: cli.weak_sink,
        out_dir,
        output_times,
        stop_time: cli.stop_time,
        emit_flow: cli.emit_flow,
        flow_in: cli.flow_in,
    }))
}
