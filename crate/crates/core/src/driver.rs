//! Simulation driver: stop time, the time-step loop over flow periods, the
//! tracking loop over output times and the particle-loop dispatch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::{debug, info};
use thiserror::Error;

use crate::flow::{FlowError, FlowStore, FlowView};
use crate::grid::{Grid, GridError};
use crate::output::{
    config_digest, write_endpoint_file, EndpointRecord, OutputError, OutputProtocol, PathlineObserver, ProtocolKind,
    StepInfo, TimeseriesObserver, ENDPOINT_FILE,
};
use crate::scheduler::{run_particle_loop, LoopError, LoopStats, ScheduleSpec, WorkerObserver};
use crate::tracking::{Particle, ParticleStatus, TrackObserver, TrackingEngine, WeakSinkPolicy};

pub const PARTIAL_MARKER: &str = "PARTIAL";

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Output(#[from] OutputError),
}

fn config_err<T>(msg: impl Into<String>) -> Result<T, DriverError> {
    Err(DriverError::Config(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Endpoint,
    Timeseries,
    Pathline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Endpoint => "endpoint",
            Mode::Timeseries => "timeseries",
            Mode::Pathline => "pathline",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "endpoint" => Ok(Mode::Endpoint),
            "timeseries" | "ts" => Ok(Mode::Timeseries),
            "pathline" => Ok(Mode::Pathline),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputTimes {
    None,
    Explicit(Vec<f64>),
    /// `k * total / count` for `k = 1..=count`.
    Equispaced {
        total: f64,
        count: usize,
    },
    /// Multiples of `interval` below the stop time, then the stop time.
    Interval {
        interval: f64,
    },
}

impl OutputTimes {
    pub fn resolve(&self, t_stop: f64) -> Result<Vec<f64>, DriverError> {
        let times = match self {
            OutputTimes::None => Vec::new(),
            OutputTimes::Explicit(t) => t.clone(),
            OutputTimes::Equispaced { total, count } => {
                if *count == 0 || !(*total > 0.0) || !total.is_finite() {
                    return config_err("equispaced output times need count >= 1 and total > 0");
                }
                (1..=*count).map(|k| k as f64 * total / *count as f64).collect()
            }
            OutputTimes::Interval { interval } => {
                if !(*interval > 0.0) || !t_stop.is_finite() {
                    return config_err("interval output times need interval > 0 and a finite stop time");
                }
                let mut v: Vec<f64> = (1..).map(|k| k as f64 * interval).take_while(|&t| t < t_stop).collect();
                v.push(t_stop);
                v
            }
        };
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return config_err("output times must be finite and non-negative");
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return config_err("output times must be strictly increasing");
        }
        if let Some(&last) = times.last() {
            if last > t_stop {
                return config_err(format!("output time {last} exceeds the stop time {t_stop}"));
            }
        }
        Ok(times)
    }

    /// Last output time, when it can be known without a stop time.
    pub fn last(&self) -> Option<f64> {
        match self {
            OutputTimes::Explicit(t) => t.last().copied(),
            OutputTimes::Equispaced { total, .. } => Some(*total),
            _ => None,
        }
    }
}

/// Where a release group is placed. All placements are deterministic and
/// assign ids in the listed order.
#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    /// `count` points at `y = y_min + (i + 1/2) (y_max - y_min) / count`.
    LineY {
        x: f64,
        z: f64,
        y_min: f64,
        y_max: f64,
    },
    /// Cell-centred sub-grid on the model top over the rectangle, filled
    /// row by row (rows along y from `y_min`).
    TopRect {
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
    },
    Points(Vec<[f64; 3]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseGroup {
    pub time: f64,
    pub count: usize,
    pub group: u32,
    pub placement: Placement,
}

fn release_points(count: usize, placement: &Placement, top: f64) -> Result<Vec<[f64; 3]>, DriverError> {
    match placement {
        Placement::LineY { x, z, y_min, y_max } => {
            let len = y_max - y_min;
            if len < 0.0 || (len == 0.0 && count > 1) {
                return config_err("release line has no extent");
            }
            Ok((0..count)
                .map(|i| [*x, y_min + (i as f64 + 0.5) * len / count as f64, *z])
                .collect())
        }
        Placement::TopRect {
            x_min,
            x_max,
            y_min,
            y_max,
        } => {
            let (w, h) = (x_max - x_min, y_max - y_min);
            if w < 0.0 || h < 0.0 || ((w == 0.0 || h == 0.0) && count > 1) {
                return config_err("release rectangle has no area");
            }
            if count == 1 {
                return Ok(vec![[x_min + 0.5 * w, y_min + 0.5 * h, top]]);
            }
            let cols = ((count as f64 * w / h).sqrt().ceil() as usize).clamp(1, count);
            let rows = count.div_ceil(cols);
            Ok((0..count)
                .map(|n| {
                    let (r, c) = (n / cols, n % cols);
                    [
                        x_min + (c as f64 + 0.5) * w / cols as f64,
                        y_min + (r as f64 + 0.5) * h / rows as f64,
                        top,
                    ]
                })
                .collect())
        }
        Placement::Points(p) => {
            if p.len() != count {
                return config_err(format!("{} release points for {count} particles", p.len()));
            }
            Ok(p.clone())
        }
    }
}

/// Creates the initial particles; ids follow placement order across groups.
pub fn release_particles(plan: &[ReleaseGroup], grid: &Grid) -> Result<Vec<Particle>, DriverError> {
    let mut particles = Vec::with_capacity(plan.iter().map(|g| g.count).sum());
    for g in plan {
        if !(g.time >= 0.0) || !g.time.is_finite() {
            return config_err(format!("release time {} must be finite and >= 0", g.time));
        }
        for point in release_points(g.count, &g.placement, grid.top_elevation())? {
            let (cell, local) = grid.locate(point)?;
            let id = particles.len() as u64;
            particles.push(Particle::new(id, g.group, grid, cell, local, g.time));
        }
    }
    Ok(particles)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub mode: Mode,
    /// `None` runs until termination (endpoint/pathline) or to the last
    /// output time (timeseries).
    pub stop_time: Option<f64>,
    pub output_times: OutputTimes,
    pub schedule: ScheduleSpec,
    pub workers: usize,
    pub weak_sink: WeakSinkPolicy,
    pub protocol: ProtocolKind,
    pub out_dir: PathBuf,
    pub releases: Vec<ReleaseGroup>,
    pub seed: u64,
    /// Canonical description of the flow problem, folded into the digest.
    pub physics: String,
    pub write_endpoints: bool,
}

impl SimulationConfig {
    pub fn new(mode: Mode, out_dir: impl Into<PathBuf>) -> Self {
        SimulationConfig {
            mode,
            stop_time: None,
            output_times: OutputTimes::None,
            schedule: ScheduleSpec::Static,
            workers: 1,
            weak_sink: WeakSinkPolicy::PassThrough,
            protocol: ProtocolKind::ParallelExclusive,
            out_dir: out_dir.into(),
            releases: Vec::new(),
            seed: 0,
            physics: String::new(),
            write_endpoints: true,
        }
    }

    /// Digest of everything that determines particle results. Workers,
    /// schedule, protocol and paths are deliberately left out.
    pub fn digest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "stop={:?}", self.stop_time.map(f64::to_bits));
        let _ = writeln!(s, "times={:?}", self.output_times);
        let _ = writeln!(s, "weak_sink={}", self.weak_sink);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "releases={:?}", self.releases);
        let _ = writeln!(s, "physics={}", self.physics);
        config_digest(&s)
    }
}

/// Simulation stop time; `f64::INFINITY` means run until every particle
/// terminates.
pub fn determine_stop_time(config: &SimulationConfig, store: &FlowStore) -> Result<f64, DriverError> {
    if let Some(t) = config.stop_time {
        if !(t >= 0.0) {
            return config_err(format!("stop time {t} must be >= 0"));
        }
        return Ok(t);
    }
    match config.mode {
        Mode::Timeseries => match config.output_times.last() {
            Some(t) => Ok(t),
            None => config_err("timeseries run without output times"),
        },
        Mode::Endpoint | Mode::Pathline => {
            if store.horizon().is_finite() {
                return config_err("running until termination needs an unbounded final flow period");
            }
            Ok(f64::INFINITY)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    pub flow_update: Duration,
    pub particle_loops: Duration,
    pub consolidation: Duration,
    pub flow_updates: usize,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.flow_update + self.particle_loops + self.consolidation
    }
}

/// One tracking step of the middle loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub period: usize,
    pub t_max: f64,
    pub ts_max: f64,
    pub t_stop: f64,
    pub output_index: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SimulationSummary {
    /// Wall time of the outermost loop, output writing included, endpoint
    /// file excluded.
    pub elapsed: Duration,
    pub timings: StageTimings,
    pub loops: LoopStats,
    pub status_histogram: BTreeMap<ParticleStatus, u64>,
    pub steps: Vec<StepTrace>,
    pub t_stop: f64,
    pub output_times: Vec<f64>,
    pub particles: Vec<Particle>,
    pub digest: String,
    /// Timeseries or pathline files produced by the run.
    pub files: Vec<PathBuf>,
    pub endpoint_file: Option<PathBuf>,
}

enum AnyObserver<'a> {
    Null,
    Timeseries(TimeseriesObserver<'a>),
    Pathline(PathlineObserver<'a>),
}

impl TrackObserver for AnyObserver<'_> {
    #[inline]
    fn released(&mut self, p: &Particle) -> std::io::Result<u64> {
        match self {
            AnyObserver::Null => Ok(0),
            AnyObserver::Timeseries(o) => o.released(p),
            AnyObserver::Pathline(o) => o.released(p),
        }
    }

    #[inline]
    fn time_limit(&mut self, p: &Particle) -> std::io::Result<u64> {
        match self {
            AnyObserver::Null => Ok(0),
            AnyObserver::Timeseries(o) => o.time_limit(p),
            AnyObserver::Pathline(o) => o.time_limit(p),
        }
    }

    #[inline]
    fn cell_transfer(&mut self, p: &Particle) -> std::io::Result<u64> {
        match self {
            AnyObserver::Null => Ok(0),
            AnyObserver::Timeseries(o) => o.cell_transfer(p),
            AnyObserver::Pathline(o) => o.cell_transfer(p),
        }
    }

    #[inline]
    fn terminal(&mut self, p: &Particle) -> std::io::Result<u64> {
        match self {
            AnyObserver::Null => Ok(0),
            AnyObserver::Timeseries(o) => o.terminal(p),
            AnyObserver::Pathline(o) => o.terminal(p),
        }
    }
}

impl WorkerObserver for AnyObserver<'_> {}

fn write_partial_marker(dir: &Path, err: &DriverError) {
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(dir.join(PARTIAL_MARKER), format!("{err}\n"));
    }
}

/// Runs a configured simulation over `store`.
///
/// On failure a `PARTIAL` marker holding the error is left in the output
/// directory.
pub fn run_simulation(config: &SimulationConfig, store: &FlowStore) -> Result<SimulationSummary, DriverError> {
    run_inner(config, store).inspect_err(|e| write_partial_marker(&config.out_dir, e))
}

fn run_inner(config: &SimulationConfig, store: &FlowStore) -> Result<SimulationSummary, DriverError> {
    if config.workers == 0 {
        return config_err("worker count must be at least 1");
    }
    let t_stop = determine_stop_time(config, store)?;
    let output_times = match config.mode {
        Mode::Timeseries => config.output_times.resolve(t_stop)?,
        _ => Vec::new(),
    };
    let grid = store.grid().clone();
    let mut particles = release_particles(&config.releases, &grid)?;
    let digest = config.digest();
    let _ = std::fs::remove_file(config.out_dir.join(PARTIAL_MARKER));

    let protocol = match config.mode {
        Mode::Endpoint => None,
        Mode::Timeseries => Some(OutputProtocol::open_timeseries(
            config.protocol,
            &config.out_dir,
            config.workers,
            &digest,
        )?),
        Mode::Pathline => Some(OutputProtocol::open_pathline(
            config.protocol,
            &config.out_dir,
            config.workers,
            &digest,
        )?),
    };
    info!(
        "{} run: {} particles, {} workers, {} schedule, stop time {t_stop}",
        config.mode,
        particles.len(),
        config.workers,
        config.schedule
    );

    let start = Instant::now();
    let mut timings = StageTimings::default();
    let mut loops = LoopStats::default();
    let mut steps = Vec::new();
    let mut next_out = 0usize;
    let mut step_no = 0u64;
    let mut previous_view: Option<FlowView> = None;

    for (period, snapshot) in store.snapshots().iter().enumerate() {
        let ts_start = store.start(period);
        if period > 0 && ts_start >= t_stop {
            break;
        }
        let ts_max = store.end(period);
        let t0 = Instant::now();
        let view = FlowView::build(snapshot);
        if let Some(prev) = &previous_view {
            if !prev.same_field(&view) {
                for p in particles
                    .iter_mut()
                    .filter(|p| p.status == ParticleStatus::ReachedStopTime)
                {
                    p.reanchor();
                }
            }
        }
        timings.flow_update += t0.elapsed();
        timings.flow_updates += 1;

        loop {
            let next = output_times.get(next_out).copied().unwrap_or(f64::INFINITY);
            let t_max = next.min(ts_max).min(t_stop);
            let output_index = (next_out < output_times.len() && next == t_max).then_some(next_out as u64 + 1);
            assert!(
                t_max <= ts_max && t_max <= t_stop,
                "tracking limit {t_max} beyond period end {ts_max} or stop time {t_stop}"
            );
            steps.push(StepTrace {
                period,
                t_max,
                ts_max,
                t_stop,
                output_index,
            });
            step_no += 1;
            let info = StepInfo {
                output_index,
                step: step_no,
            };
            let grid_ref: &Grid = &grid;
            let proto = protocol.as_ref();
            let t1 = Instant::now();
            let stats = run_particle_loop(
                &mut particles,
                config.workers,
                config.schedule,
                |_| TrackingEngine::new(&view, config.weak_sink),
                |w| match (config.mode, proto) {
                    (Mode::Timeseries, Some(p)) => {
                        AnyObserver::Timeseries(TimeseriesObserver::new(p, grid_ref, w, info))
                    }
                    (Mode::Pathline, Some(p)) => AnyObserver::Pathline(PathlineObserver::new(p, grid_ref, w, info)),
                    _ => AnyObserver::Null,
                },
                t_max,
            )?;
            timings.particle_loops += t1.elapsed();
            loops.merge(&stats);
            debug!("step {step_no}: t_max {t_max}, {:?}", stats.counters);

            if let (Some(index), Some(p)) = (output_index, protocol.as_ref()) {
                let t2 = Instant::now();
                p.consolidate_step(index)?;
                p.flush()?;
                timings.consolidation += t2.elapsed();
                next_out += 1;
            } else if output_index.is_some() {
                next_out += 1;
            }
            if t_max >= ts_max || t_max >= t_stop {
                break;
            }
        }
        previous_view = Some(view);
        if ts_max >= t_stop {
            break;
        }
    }

    let files = match protocol {
        Some(p) => {
            let t3 = Instant::now();
            let files = p.finish()?;
            timings.consolidation += t3.elapsed();
            files
        }
        None => Vec::new(),
    };
    let elapsed = start.elapsed();

    let mut status_histogram = BTreeMap::new();
    for p in &particles {
        *status_histogram.entry(p.status).or_insert(0) += 1;
    }
    let endpoint_file = if config.write_endpoints {
        std::fs::create_dir_all(&config.out_dir).map_err(|source| OutputError::Io {
            path: config.out_dir.clone(),
            source,
        })?;
        let path = config.out_dir.join(ENDPOINT_FILE);
        let records: Vec<EndpointRecord> = particles.iter().map(EndpointRecord::from_particle).collect();
        write_endpoint_file(&records, &path, &digest)?;
        Some(path)
    } else {
        None
    };
    info!(
        "loop time {:.3} s, statuses {status_histogram:?}",
        elapsed.as_secs_f64()
    );

    Ok(SimulationSummary {
        elapsed,
        timings,
        loops,
        status_histogram,
        steps,
        t_stop,
        output_times,
        particles,
        digest,
        files,
        endpoint_file,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{
        solve_steady, BoundaryConditionSet, ConductivityTensor, FlowSnapshot, HeadBoundary, SolverOptions,
    };
    use crate::grid::{Axis, Face, Side};
    use crate::output::decode_timeseries;
    use std::sync::Arc;

    fn channel() -> FlowSnapshot {
        let grid = Arc::new(Grid::build_structured(20, 3, 1, 1.0, 1.0, &[1.0], [0.0; 3]).unwrap());
        let mut hb = Vec::new();
        for j in 0..3 {
            hb.push(HeadBoundary {
                cell: grid.cell_id(0, j, 0).unwrap(),
                face: Face::new(Axis::X, Side::Low),
                head: 30.0,
            });
            hb.push(HeadBoundary {
                cell: grid.cell_id(19, j, 0).unwrap(),
                face: Face::new(Axis::X, Side::High),
                head: 10.0,
            });
        }
        let bcs = BoundaryConditionSet {
            head_boundaries: hb,
            ..Default::default()
        };
        let n = grid.cell_count();
        solve_steady(
            grid,
            &ConductivityTensor::uniform(n, 1.0),
            &bcs,
            &SolverOptions::default(),
        )
        .unwrap()
    }

    fn line(count: usize) -> Vec<ReleaseGroup> {
        vec![ReleaseGroup {
            time: 0.0,
            count,
            group: 0,
            placement: Placement::LineY {
                x: 1.0,
                z: 0.5,
                y_min: 0.0,
                y_max: 3.0,
            },
        }]
    }

    #[test]
    fn release_line_spacing() {
        let grid = Grid::build_structured(20, 300, 1, 1.0, 1.0, &[1.0], [0.0; 3]).unwrap();
        let plan = vec![ReleaseGroup {
            time: 0.0,
            count: 3,
            group: 0,
            placement: Placement::LineY {
                x: 10.0,
                z: 0.5,
                y_min: 0.0,
                y_max: 300.0,
            },
        }];
        let ps = release_particles(&plan, &grid).unwrap();
        let ys: Vec<f64> = ps.iter().map(|p| p.position[1]).collect();
        assert_eq!(ys, vec![50.0, 150.0, 250.0]);
        assert_eq!(ps.iter().map(|p| p.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn release_rect_and_errors() {
        let grid = Grid::build_structured(4, 4, 2, 10.0, 10.0, &[5.0, 5.0], [0.0; 3]).unwrap();
        let rect = Placement::TopRect {
            x_min: 0.0,
            x_max: 20.0,
            y_min: 20.0,
            y_max: 40.0,
        };
        let one = release_particles(
            &[ReleaseGroup {
                time: 0.0,
                count: 1,
                group: 0,
                placement: rect.clone(),
            }],
            &grid,
        )
        .unwrap();
        assert_eq!(one[0].position, [10.0, 30.0, 10.0]);
        let plan: Vec<ReleaseGroup> = (0..10)
            .map(|s| ReleaseGroup {
                time: 20.0 * s as f64,
                count: 7,
                group: s,
                placement: rect.clone(),
            })
            .collect();
        let ps = release_particles(&plan, &grid).unwrap();
        assert_eq!(ps.len(), 70);
        let times: Vec<f64> = ps.iter().step_by(7).map(|p| p.release_time).collect();
        assert_eq!(times, (0..10).map(|s| 20.0 * s as f64).collect::<Vec<_>>());
        for p in &ps {
            assert_eq!(p.local[2], 1.0);
            assert!(p.position[0] > 0.0 && p.position[0] < 20.0);
            assert!(p.position[1] > 20.0 && p.position[1] < 40.0);
        }
        let flat = Placement::TopRect {
            x_min: 0.0,
            x_max: 0.0,
            y_min: 0.0,
            y_max: 10.0,
        };
        assert!(release_particles(
            &[ReleaseGroup {
                time: 0.0,
                count: 2,
                group: 0,
                placement: flat
            }],
            &grid
        )
        .is_err());
        let neg = ReleaseGroup {
            time: -1.0,
            count: 1,
            group: 0,
            placement: rect,
        };
        assert!(release_particles(&[neg], &grid).is_err());
    }

    #[test]
    fn output_time_rules() {
        let eq = OutputTimes::Equispaced {
            total: 60000.0,
            count: 30,
        };
        let t = eq.resolve(60000.0).unwrap();
        assert_eq!(t.len(), 30);
        assert_eq!(t[0], 2000.0);
        assert_eq!(*t.last().unwrap(), 60000.0);
        assert_eq!(
            OutputTimes::Interval { interval: 50.0 }.resolve(20.0).unwrap(),
            vec![20.0]
        );
        assert_eq!(
            OutputTimes::Interval { interval: 5.0 }.resolve(12.0).unwrap(),
            vec![5.0, 10.0, 12.0]
        );
        assert!(OutputTimes::Explicit(vec![2.0, 1.0]).resolve(5.0).is_err());
        assert!(OutputTimes::Explicit(vec![1.0, 6.0]).resolve(5.0).is_err());
    }

    #[test]
    fn stop_time_rules() {
        let store = FlowStore::single(channel()).unwrap();
        let mut cfg = SimulationConfig::new(Mode::Timeseries, "/nonexistent");
        cfg.output_times = OutputTimes::Equispaced {
            total: 60000.0,
            count: 30,
        };
        assert_eq!(determine_stop_time(&cfg, &store).unwrap(), 60000.0);
        cfg.output_times = OutputTimes::Explicit(vec![]);
        assert!(determine_stop_time(&cfg, &store).is_err());
        cfg.mode = Mode::Endpoint;
        assert_eq!(determine_stop_time(&cfg, &store).unwrap(), f64::INFINITY);
        let bounded = FlowStore::single(channel().with_duration(Some(10.0))).unwrap();
        assert!(determine_stop_time(&cfg, &bounded).is_err());
        cfg.stop_time = Some(0.0);
        assert_eq!(determine_stop_time(&cfg, &bounded).unwrap(), 0.0);
    }

    #[test]
    fn zero_stop_time_leaves_particles_at_release() {
        let dir = tempfile::tempdir().unwrap();
        let store = FlowStore::single(channel()).unwrap();
        let mut cfg = SimulationConfig::new(Mode::Endpoint, dir.path());
        cfg.releases = line(3);
        cfg.stop_time = Some(0.0);
        let s = run_simulation(&cfg, &store).unwrap();
        for p in &s.particles {
            assert_eq!(p.status, ParticleStatus::ReachedStopTime);
            assert_eq!(p.position, p.initial_position);
        }
    }

    #[test]
    fn endpoint_run_reaches_outlet() {
        let dir = tempfile::tempdir().unwrap();
        let store = FlowStore::single(channel()).unwrap();
        let mut cfg = SimulationConfig::new(Mode::Endpoint, dir.path());
        cfg.releases = line(6);
        let s = run_simulation(&cfg, &store).unwrap();
        assert_eq!(s.status_histogram.get(&ParticleStatus::ReachedBoundary), Some(&6));
        for p in &s.particles {
            assert!((p.time - 19.0).abs() < 1e-9, "{}", p.time);
        }
        assert_eq!(s.loops.counters.particles_completed, 6);
        assert!(s.endpoint_file.unwrap().exists());
        assert!(s.timings.total() <= s.elapsed);
    }

    #[test]
    fn timeseries_records_every_live_particle_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = FlowStore::single(channel()).unwrap();
        for kind in ProtocolKind::ALL {
            let mut cfg = SimulationConfig::new(Mode::Timeseries, dir.path().join(kind.as_str()));
            cfg.releases = line(5);
            cfg.protocol = kind;
            cfg.workers = 2;
            cfg.output_times = OutputTimes::Equispaced { total: 25.0, count: 5 };
            let s = run_simulation(&cfg, &store).unwrap();
            let recs = decode_timeseries(&s.files).unwrap();
            // Travel time is 19 d: alive at 5, 10, 15 only.
            assert_eq!(recs.len(), 15);
            for r in &recs {
                assert_eq!(r.time, s.output_times[r.time_index as usize - 1]);
            }
        }
    }

    #[test]
    fn split_periods_match_single_period() {
        let dir = tempfile::tempdir().unwrap();
        let single = FlowStore::single(channel()).unwrap();
        let split = FlowStore::new(vec![channel().with_duration(Some(7.3)), channel()]).unwrap();
        let mut cfg = SimulationConfig::new(Mode::Endpoint, dir.path());
        cfg.releases = line(9);
        let a = run_simulation(&cfg, &single).unwrap();
        let b = run_simulation(&cfg, &split).unwrap();
        assert_eq!(a.particles, b.particles);
        assert_eq!(a.timings.flow_updates, 1);
        assert_eq!(b.timings.flow_updates, 2);
        for st in &b.steps {
            assert!(st.t_max <= st.ts_max && st.t_max <= st.t_stop);
        }
    }

    #[test]
    fn failure_leaves_partial_marker() {
        let dir = tempfile::tempdir().unwrap();
        let store = FlowStore::single(channel()).unwrap();
        let mut cfg = SimulationConfig::new(Mode::Pathline, dir.path());
        cfg.protocol = ProtocolKind::CriticalSingle;
        cfg.releases = line(1);
        assert!(run_simulation(&cfg, &store).is_err());
        assert!(dir.path().join(PARTIAL_MARKER).exists());
    }

    #[test]
    fn digest_ignores_parallel_settings() {
        let mut a = SimulationConfig::new(Mode::Endpoint, "/a");
        let mut b = a.clone();
        b.workers = 8;
        b.schedule = ScheduleSpec::DYNAMIC;
        b.out_dir = "/b".into();
        assert_eq!(a.digest(), b.digest());
        a.seed = 3;
        assert_ne!(a.digest(), b.digest());
    }
}
