//! Benchmark matrix: cartesian sweeps over scenario and loop settings,
//! timed with the simulation's elapsed loop time.
//!
//! Matrix files hold `key = v1, v2, ...` lines. List keys: `scenario`,
//! `mode`, `np`, `threads`, `schedule`, `chunk`, `protocol`, `sigma2`,
//! `ts_count`, `refine`. Scalar keys: `reps`, `warmup`, `seed`, `scale`.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{error, info, warn};

use ptrace_core::driver::{run_simulation, Mode, SimulationSummary};
use ptrace_core::flow::FlowStore;
use ptrace_core::output::{decode_pathlines, decode_timeseries, read_endpoint_file, ProtocolKind};
use ptrace_core::scenarios::{ScenarioKind, ScenarioSpec};
use ptrace_core::scheduler::ScheduleSpec;

use crate::args::{check_protocol, CliError, ScenarioParams};
use crate::run::{build_scenario, flow_for, tc1_output_times};

pub const CSV_VERSION: &str = "# ptrace bench csv v1";
pub const CSV_HEADER: [&str; 14] = [
    "scenario",
    "mode",
    "np",
    "threads",
    "schedule",
    "chunk",
    "protocol",
    "sigma2",
    "ts_count",
    "refine",
    "rep_median_s",
    "speedup",
    "ratio_dyn_sta",
    "ratio_refined_base",
];
/// Reference 8-thread speedups for tc1 (sigma2 = 2.5, N_p >= 1e5) on an
/// 8-core desktop; reference metadata only.
pub const REFERENCE_NOTES: [&str; 2] = [
    "# reference: tc1 sigma2=2.5 np>=1e5 static T1/T8 = 5.09 (8-core desktop, hardware specific)",
    "# reference: tc1 sigma2=2.5 np>=1e5 dynamic T1/T8 = 6.63 (8-core desktop, hardware specific)",
];
/// Protocol column value for endpoint cells, which write no stream.
pub const NO_PROTOCOL: &str = "-";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchMatrix {
    pub scenarios: Vec<ScenarioKind>,
    /// `None` uses each scenario's default mode.
    pub modes: Vec<Option<Mode>>,
    pub np: Vec<usize>,
    pub threads: Vec<usize>,
    pub schedules: Vec<ScheduleSpec>,
    /// Chunk sizes for every dynamic schedule; empty keeps each
    /// schedule's own chunk.
    pub chunks: Vec<usize>,
    pub protocols: Vec<ProtocolKind>,
    pub sigma2: Vec<f64>,
    pub ts_count: Vec<usize>,
    pub refine: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub scale: Option<f64>,
}

impl BenchMatrix {
    /// Desk-scale tc1 sweep: N_p 1e3..1e6, powers of two up to
    /// `min(8, cores)` workers, both schedules.
    pub fn desk_default() -> Self {
        let cores = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(8);
        let threads = (0..4).map(|k| 1usize << k).filter(|&n| n <= cores).collect();
        BenchMatrix {
            scenarios: vec![ScenarioKind::Tc1],
            modes: vec![Some(Mode::Endpoint)],
            np: vec![1_000, 10_000, 100_000, 1_000_000],
            threads,
            schedules: vec![ScheduleSpec::Static, ScheduleSpec::DYNAMIC],
            chunks: Vec::new(),
            protocols: vec![ProtocolKind::ParallelExclusive],
            sigma2: vec![2.5],
            ts_count: vec![5],
            refine: vec![1],
            reps: 3,
            warmup: 1,
            seed: 1,
            scale: Some(0.2),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read matrix {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut m = BenchMatrix {
            scenarios: vec![ScenarioKind::Tc1],
            modes: vec![None],
            np: vec![10_000],
            threads: vec![1],
            schedules: vec![ScheduleSpec::Static],
            chunks: Vec::new(),
            protocols: vec![ProtocolKind::ParallelExclusive],
            sigma2: vec![2.5],
            ts_count: vec![5],
            refine: vec![1],
            reps: 3,
            warmup: 1,
            seed: 1,
            scale: None,
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: String| format!("line {}: {e}", n + 1);
            let (key, values) = line
                .split_once('=')
                .ok_or_else(|| at("expected `key = v1, v2, ...`".into()))?;
            let key = key.trim().replace('-', "_");
            let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if items.is_empty() {
                return Err(at(format!("`{key}` has no values")));
            }
            let single = || -> Result<&str, String> {
                match items.as_slice() {
                    [one] => Ok(*one),
                    _ => Err(at(format!("`{key}` takes a single value"))),
                }
            };
            match key.as_str() {
                "scenario" => m.scenarios = list(&items).map_err(at)?,
                "mode" => m.modes = list::<Mode>(&items).map_err(at)?.into_iter().map(Some).collect(),
                "np" => m.np = items.iter().map(|s| count(s)).collect::<Result<_, _>>().map_err(at)?,
                "threads" => m.threads = list(&items).map_err(at)?,
                "schedule" => m.schedules = list(&items).map_err(at)?,
                "chunk" => m.chunks = list(&items).map_err(at)?,
                "protocol" => m.protocols = list(&items).map_err(at)?,
                "sigma2" => m.sigma2 = list(&items).map_err(at)?,
                "ts_count" => m.ts_count = list(&items).map_err(at)?,
                "refine" => m.refine = list(&items).map_err(at)?,
                "reps" => m.reps = single()?.parse().map_err(|_| at("bad reps".into()))?,
                "warmup" => m.warmup = single()?.parse().map_err(|_| at("bad warmup".into()))?,
                "seed" => m.seed = single()?.parse().map_err(|_| at("bad seed".into()))?,
                "scale" => m.scale = Some(single()?.parse().map_err(|_| at("bad scale".into()))?),
                _ => return Err(at(format!("unknown key `{key}`"))),
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Usage(msg.to_string()));
        if self.reps == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.threads.contains(&0) {
            return bad("worker counts must be at least 1");
        }
        if self.chunks.contains(&0) {
            return bad("chunk sizes must be at least 1");
        }
        if self.np.contains(&0) {
            return bad("particle counts must be at least 1");
        }
        if self.refine.contains(&0) || self.ts_count.contains(&0) {
            return bad("refine and ts_count must be at least 1");
        }
        if self.sigma2.iter().any(|s| !(0.0..=5.0).contains(s)) {
            return bad("sigma2 must lie in [0, 5]");
        }
        if let Some(s) = self.scale {
            if !(s > 0.0 && s <= 1.0) {
                return bad("scale must lie in (0, 1]");
            }
        }
        Ok(())
    }

    /// Every runnable cell, in sweep order. Endpoint cells collapse the
    /// protocol list; invalid mode/protocol pairs are skipped.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &scenario in &self.scenarios {
            let mut base = ScenarioParams::default_for(scenario);
            base.seed = self.seed;
            if let Some(s) = self.scale {
                base.scale = s;
            }
            let (sigmas, refines) = match scenario {
                ScenarioKind::Tc1 => (self.sigma2.clone(), vec![1]),
                ScenarioKind::Tc2 => (vec![0.0], self.refine.clone()),
            };
            for &sigma2 in &sigmas {
                for &refine in &refines {
                    for &ts_count in &self.ts_count {
                        for mode in &self.modes {
                            let mode = mode.unwrap_or(match scenario {
                                ScenarioKind::Tc1 => Mode::Endpoint,
                                ScenarioKind::Tc2 => Mode::Timeseries,
                            });
                            let protocols: Vec<Option<ProtocolKind>> = match mode {
                                Mode::Endpoint => vec![None],
                                _ => self
                                    .protocols
                                    .iter()
                                    .filter(|&&p| check_protocol(mode, p, true).is_ok())
                                    .map(|&p| Some(p))
                                    .collect(),
                            };
                            for &np in &self.np {
                                for &protocol in &protocols {
                                    for schedule in self.schedule_list() {
                                        for &threads in &self.threads {
                                            let mut params = base.clone();
                                            params.sigma2 = sigma2;
                                            params.refine = refine;
                                            params.ts_count = ts_count;
                                            params.np = np;
                                            out.push(Cell {
                                                params,
                                                mode,
                                                threads,
                                                schedule,
                                                protocol,
                                            });
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn schedule_list(&self) -> Vec<ScheduleSpec> {
        let mut list = Vec::new();
        for s in &self.schedules {
            match s {
                ScheduleSpec::Static => list.push(ScheduleSpec::Static),
                ScheduleSpec::Dynamic { .. } if !self.chunks.is_empty() => {
                    list.extend(self.chunks.iter().map(|&chunk| ScheduleSpec::Dynamic { chunk }))
                }
                dynamic => list.push(*dynamic),
            }
        }
        list
    }
}

fn list<T: std::str::FromStr>(items: &[&str]) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    items
        .iter()
        .map(|s| s.parse::<T>().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

/// Particle counts also accept `1e6` notation.
fn count(s: &str) -> Result<usize, String> {
    if let Ok(n) = s.parse::<usize>() {
        return Ok(n);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < 1e15 => Ok(v as usize),
        _ => Err(format!("bad particle count `{s}`")),
    }
}

/// One benchmark coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub params: ScenarioParams,
    pub mode: Mode,
    pub threads: usize,
    pub schedule: ScheduleSpec,
    pub protocol: Option<ProtocolKind>,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scenario: String,
    pub mode: String,
    pub np: usize,
    pub threads: usize,
    pub schedule: String,
    pub chunk: usize,
    pub protocol: String,
    pub sigma2: f64,
    pub ts_count: usize,
    pub refine: usize,
    /// `None` marks a failed cell.
    pub median_s: Option<f64>,
    pub speedup: Option<f64>,
    pub ratio_dyn_sta: Option<f64>,
    pub ratio_refined_base: Option<f64>,
}

impl BenchRow {
    fn from_cell(cell: &Cell, median_s: Option<f64>) -> Self {
        BenchRow {
            scenario: cell.params.kind.as_str().to_string(),
            mode: cell.mode.as_str().to_string(),
            np: cell.params.np,
            threads: cell.threads,
            schedule: cell.schedule.name().to_string(),
            chunk: cell.schedule.chunk(),
            protocol: cell
                .protocol
                .map_or(NO_PROTOCOL.to_string(), |p| p.as_str().to_string()),
            sigma2: cell.params.sigma2,
            ts_count: cell.params.ts_count,
            refine: cell.params.refine,
            median_s,
            speedup: None,
            ratio_dyn_sta: None,
            ratio_refined_base: None,
        }
    }

    /// Coordinates with the named fields blanked, for matching rows.
    fn key_without(&self, skip: &[&str]) -> String {
        let fields = [
            ("scenario", self.scenario.clone()),
            ("mode", self.mode.clone()),
            ("np", self.np.to_string()),
            ("threads", self.threads.to_string()),
            ("schedule", self.schedule.clone()),
            ("chunk", self.chunk.to_string()),
            ("protocol", self.protocol.clone()),
            ("sigma2", self.sigma2.to_string()),
            ("ts_count", self.ts_count.to_string()),
            ("refine", self.refine.to_string()),
        ];
        fields
            .iter()
            .filter(|(k, _)| !skip.contains(k))
            .map(|(_, v)| v.as_str())
            .collect::<Vec<_>>()
            .join("|")
    }

    pub fn to_record(&self) -> Vec<String> {
        let opt = |v: Option<f64>, digits: usize| v.map_or(String::new(), |x| format!("{x:.digits$}"));
        vec![
            self.scenario.clone(),
            self.mode.clone(),
            self.np.to_string(),
            self.threads.to_string(),
            self.schedule.clone(),
            self.chunk.to_string(),
            self.protocol.clone(),
            self.sigma2.to_string(),
            self.ts_count.to_string(),
            self.refine.to_string(),
            self.median_s.map_or("failed".to_string(), |x| format!("{x:.6}")),
            opt(self.speedup, 4),
            opt(self.ratio_dyn_sta, 4),
            opt(self.ratio_refined_base, 4),
        ]
    }

    pub fn from_record(rec: &csv::StringRecord) -> Result<Self, String> {
        if rec.len() != CSV_HEADER.len() {
            return Err(format!("expected {} columns, found {}", CSV_HEADER.len(), rec.len()));
        }
        let num = |i: usize| -> Result<f64, String> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| format!("bad {} `{}`", CSV_HEADER[i], &rec[i]))
        };
        let int = |i: usize| -> Result<usize, String> {
            rec[i]
                .parse::<usize>()
                .map_err(|_| format!("bad {} `{}`", CSV_HEADER[i], &rec[i]))
        };
        let opt = |i: usize| -> Result<Option<f64>, String> {
            match &rec[i] {
                "" | "failed" => Ok(None),
                _ => num(i).map(Some),
            }
        };
        Ok(BenchRow {
            scenario: rec[0].to_string(),
            mode: rec[1].to_string(),
            np: int(2)?,
            threads: int(3)?,
            schedule: rec[4].to_string(),
            chunk: int(5)?,
            protocol: rec[6].to_string(),
            sigma2: num(7)?,
            ts_count: int(8)?,
            refine: int(9)?,
            median_s: opt(10)?,
            speedup: opt(11)?,
            ratio_dyn_sta: opt(12)?,
            ratio_refined_base: opt(13)?,
        })
    }
}

/// Fills the derived columns.
///
/// - `speedup`: median of the matched 1-worker row over this row's median.
/// - `ratio_dyn_sta`: dynamic over static median at the same coordinates;
///   1.0 on static rows and on 1-worker rows, where both schedules run the
///   same single in-order loop.
/// - `ratio_refined_base`: refined over refine-1 median; 1.0 on base rows.
pub fn derive_columns(rows: &mut [BenchRow]) {
    let medians: HashMap<String, f64> = rows
        .iter()
        .filter_map(|r| r.median_s.map(|m| (r.key_without(&[]), m)))
        .collect();
    let lookup = |r: &BenchRow, field: &str, value: String| -> Option<f64> {
        let mut probe = r.clone();
        match field {
            "threads" => {
                // The 1-worker reference runs the same schedule and chunk.
                probe.threads = value.parse().ok()?
            }
            "schedule" => {
                probe.schedule = value;
                probe.chunk = 0;
            }
            "refine" => probe.refine = value.parse().ok()?,
            _ => unreachable!(),
        }
        medians.get(&probe.key_without(&[])).copied()
    };
    for row in rows.iter_mut() {
        let r = row.clone();
        let Some(m) = r.median_s else { continue };
        row.speedup = lookup(&r, "threads", "1".into()).map(|t1| t1 / m);
        row.ratio_dyn_sta = if r.schedule == "static" || r.threads == 1 {
            Some(1.0)
        } else {
            lookup(&r, "schedule", "static".into()).map(|s| m / s)
        };
        row.ratio_refined_base = if r.refine == 1 {
            Some(1.0)
        } else {
            lookup(&r, "refine", "1".into()).map(|b| m / b)
        };
    }
}

pub fn write_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "{CSV_VERSION}")?;
    for note in REFERENCE_NOTES {
        writeln!(file, "{note}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        anyhow::bail!("{}: unexpected header {:?}", path.display(), header);
    }
    let mut rows = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec?;
        rows.push(BenchRow::from_record(&rec).map_err(|e| anyhow::anyhow!("{} row {}: {e}", path.display(), n + 1))?);
    }
    Ok(rows)
}

/// Order-independent digest of a run's particle results: a wrapping sum
/// of per-record hashes plus the record count.
fn result_digest(summary: &SimulationSummary, mode: Mode) -> Result<(u64, usize)> {
    let mut sum = 0u64;
    let mut n = 0usize;
    let mut add = |text: String| {
        let mut h = DefaultHasher::new();
        text.hash(&mut h);
        sum = sum.wrapping_add(h.finish());
        n += 1;
    };
    if let Some(path) = &summary.endpoint_file {
        for r in read_endpoint_file(path)? {
            add(r.to_text());
        }
    }
    match mode {
        Mode::Timeseries => {
            for r in decode_timeseries(&summary.files)? {
                add(r.to_text());
            }
        }
        Mode::Pathline => {
            for r in decode_pathlines(&summary.files)? {
                add(r.to_text());
            }
        }
        Mode::Endpoint => {}
    }
    Ok((sum, n))
}

struct Prepared {
    spec: ScenarioSpec,
    store: FlowStore,
}

fn run_cell(
    cell: &Cell,
    prepared: &mut Prepared,
    dir: &Path,
    warmup: usize,
    reps: usize,
) -> Result<(f64, (u64, usize))> {
    let spec = &mut prepared.spec;
    spec.set_particles(cell.params.np);
    spec.set_ts_count(cell.params.ts_count);
    let mut config = spec.config(dir);
    config.mode = cell.mode;
    config.workers = cell.threads;
    config.schedule = cell.schedule;
    config.protocol = cell.protocol.unwrap_or(ProtocolKind::ParallelExclusive);
    if cell.mode == Mode::Timeseries && spec.kind == ScenarioKind::Tc1 {
        config.output_times = tc1_output_times(spec, cell.params.ts_count);
    }
    let mut times = Vec::with_capacity(reps);
    let mut digest = (0, 0);
    for rep in 0..warmup + reps {
        let _ = std::fs::remove_dir_all(dir);
        std::fs::create_dir_all(dir)?;
        let summary = run_simulation(&config, &prepared.store)?;
        if rep >= warmup {
            times.push(summary.elapsed.as_secs_f64());
        }
        if rep + 1 == warmup + reps {
            digest = result_digest(&summary, cell.mode)?;
        }
    }
    let _ = std::fs::remove_dir_all(dir);
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    Ok((median, digest))
}

/// Runs every cell serially, checks that each cell reproduces the results
/// of its 1-worker counterpart, and writes the CSV.
pub fn run_bench(matrix: &BenchMatrix, out_dir: &Path, out_csv: &Path) -> Result<Vec<BenchRow>> {
    let cells = matrix.cells();
    if matrix.scale == Some(1.0) {
        warn!("full-scale matrix (scale = 1): flow solves and runs may take hours");
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut prepared: BTreeMap<String, Prepared> = BTreeMap::new();
    let mut rows = Vec::with_capacity(cells.len());
    let mut digests: Vec<Option<(u64, usize)>> = Vec::with_capacity(cells.len());
    for (k, cell) in cells.iter().enumerate() {
        let p = &cell.params;
        let flow_key = format!(
            "{}|{}|{}|{}|{}|{}",
            p.kind.as_str(),
            p.sigma2,
            p.refine,
            p.scale,
            p.seed,
            p.wells
        );
        if !prepared.contains_key(&flow_key) {
            info!("solving flow for {flow_key}");
            let prep = build_scenario(p).and_then(|spec| {
                let snap = flow_for(&spec, None)?;
                let store = spec.store(&snap)?;
                Ok(Prepared { spec, store })
            });
            match prep {
                Ok(prep) => {
                    prepared.insert(flow_key.clone(), prep);
                }
                Err(e) => {
                    error!("cell {k}: flow setup failed: {e:#}");
                    rows.push(BenchRow::from_cell(cell, None));
                    digests.push(None);
                    continue;
                }
            }
        }
        let prep = prepared.get_mut(&flow_key).unwrap();
        let dir: PathBuf = out_dir.join(format!("cell-{k}"));
        info!(
            "cell {}/{}: {} {} np {} threads {} {} {}",
            k + 1,
            cells.len(),
            p.kind.as_str(),
            cell.mode,
            p.np,
            cell.threads,
            cell.schedule,
            cell.protocol.map_or(NO_PROTOCOL, |p| p.as_str())
        );
        match run_cell(cell, prep, &dir, matrix.warmup, matrix.reps) {
            Ok((median, digest)) => {
                rows.push(BenchRow::from_cell(cell, Some(median)));
                digests.push(Some(digest));
            }
            Err(e) => {
                error!("cell {k} failed: {e:#}");
                rows.push(BenchRow::from_cell(cell, None));
                digests.push(None);
            }
        }
    }

    // Result determinism against the 1-worker cells of the same problem.
    let problem = |r: &BenchRow| r.key_without(&["threads", "schedule", "chunk", "protocol"]);
    let mut serial: HashMap<String, (u64, usize)> = HashMap::new();
    for (r, d) in rows.iter().zip(&digests) {
        if let (1, Some(d)) = (r.threads, d) {
            serial.entry(problem(r)).or_insert(*d);
        }
    }
    for (r, d) in rows.iter_mut().zip(&digests) {
        if let (Some(d), Some(reference)) = (d, serial.get(&problem(r))) {
            if d != reference {
                error!("{}: results differ from the 1-worker run", r.key_without(&[]));
                r.median_s = None;
            }
        }
    }
    derive_columns(&mut rows);
    write_csv(&rows, out_csv)?;
    Ok(rows)
}
