//! Builders for the two synthetic test cases.
//!
//! **TC1**: two-dimensional heterogeneous aquifer, 1500 x 300 cells of
//! 1 m, log-conductivity `Y` with exponential covariance (I_Y = 10 m) and
//! `K = exp(sigma_Y Y)`. Prescribed heads on the west (10 + L_x m) and east
//! (10 m) hull faces give a unit mean gradient. Particles start on the line
//! `x = 10 m`. A `scale` in (0, 1] shrinks both horizontal cell counts, keeps
//! the 1 m cells and I_Y, and keeps the unit gradient.
//!
//! **TC2**: three homogeneous layers (bottom aquifer, aquitard, top aquifer)
//! on a 21 x 20 grid of 500 m cells, so 420 cells per layer. `refine`
//! splits every cell horizontally into `refine^2` cells. Layer thickness from
//! top to bottom is 130, 20 and 200 m; the model bottom is at z = 0.
//! Fixed placements, in unrefined cell indices (`i` east, `j` north):
//!
//! - W1, top layer, -7.5e4 m^3/d, at the point (4625, 7125), inside cell
//!   (9, 14).
//! - W3, bottom layer, -1e5 m^3/d, at the point (6125, 3625), inside cell
//!   (12, 7).
//! - River: the whole east column (`i = 20`) of the top layer, stage 320 m,
//!   bottom 317 m.
//! - Drains: top layer, row `j = 14`, `i = 3..=7`, elevation 322.5 m.
//! - River and drain conductance is 1e5 m^2/d per unrefined cell, split
//!   evenly over the refined cells that carry it.
//! - Recharge of 5e-3 m/d over the whole top.
//! - Releases on the top face of the four north-west cells, `i` in 0..=1 and
//!   `j` in 18..=19, in 10 stages every 20 d.
//!
//! Wells sit at the centre of the south-west quarter of their cell, so they
//! fall on a cell centre for refine 1 and 2. The flow periods are a 1 d
//! steady period, ten 36.5 d steps and a final unbounded period, all with
//! the same boundary conditions. For TC2, `scale` shortens the timeseries
//! horizon `T_ts = 60000 d`.
//!
//! Porosity defaults to 1 in both cases.

use std::fmt::Write as _;
use std::sync::Arc;

use log::warn;
use thiserror::Error;

use crate::driver::{Mode, OutputTimes, Placement, ReleaseGroup, SimulationConfig};
use crate::flow::{
    solve_steady, BoundaryConditionSet, ConductivityTensor, Drain, FlowError, FlowSnapshot, FlowStore, HeadBoundary,
    Porosity, River, SolverOptions, Well,
};
use crate::geostat::{generate_field, scale_to_conductivity, GeostatError};
use crate::grid::{Axis, Face, Grid, GridError, Side};
use crate::scheduler::ScheduleSpec;
use crate::tracking::WeakSinkPolicy;

pub const TC1_LX: f64 = 1500.0;
pub const TC1_LY: f64 = 300.0;
pub const TC1_CELL: f64 = 1.0;
pub const TC1_CORR_LEN: f64 = 10.0;
pub const TC1_OUTLET_HEAD: f64 = 10.0;
pub const TC1_RELEASE_X: f64 = 10.0;

pub const TC2_NX: usize = 21;
pub const TC2_NY: usize = 20;
pub const TC2_CELL: f64 = 500.0;
/// Layer thickness, bottom to top (m).
pub const TC2_DZ: [f64; 3] = [200.0, 20.0, 130.0];
/// Horizontal conductivity, bottom to top (m/d).
pub const TC2_KH: [f64; 3] = [200.0, 0.01, 50.0];
/// Vertical conductivity, bottom to top (m/d).
pub const TC2_KV: [f64; 3] = [20.0, 0.01, 10.0];
pub const TC2_Q_W1: f64 = -7.5e4;
pub const TC2_Q_W3: f64 = -1e5;
pub const TC2_RECHARGE: f64 = 5e-3;
pub const TC2_RIVER_STAGE: f64 = 320.0;
pub const TC2_RIVER_BOTTOM: f64 = 317.0;
pub const TC2_RIVER_COND: f64 = 1e5;
pub const TC2_DRAIN_ELEV: f64 = 322.5;
pub const TC2_DRAIN_COND: f64 = 1e5;
pub const TC2_T_TS: f64 = 60000.0;
pub const TC2_STAGES: usize = 10;
pub const TC2_STAGE_INTERVAL: f64 = 20.0;
pub const TC2_W1_POINT: [f64; 2] = [4625.0, 7125.0];
pub const TC2_W3_POINT: [f64; 2] = [6125.0, 3625.0];
pub const TC2_DRAIN_ROW: usize = 14;
pub const TC2_DRAIN_COLS: std::ops::RangeInclusive<usize> = 3..=7;
pub const TC2_PERIODS: [Option<f64>; 12] = [
    Some(1.0),
    Some(36.5),
    Some(36.5),
    Some(36.5),
    Some(36.5),
    Some(36.5),
    Some(36.5),
    Some(36.5),
    Some(36.5),
    Some(36.5),
    Some(36.5),
    None,
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geostat(#[from] GeostatError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Tc1,
    Tc2,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Tc1 => "tc1",
            ScenarioKind::Tc2 => "tc2",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tc1" => Ok(ScenarioKind::Tc1),
            "tc2" => Ok(ScenarioKind::Tc2),
            _ => Err(format!("unknown scenario `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tc2Options {
    pub wells: bool,
}

impl Default for Tc2Options {
    fn default() -> Self {
        Tc2Options { wells: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub grid: Arc<Grid>,
    pub conductivity: ConductivityTensor,
    pub bcs: BoundaryConditionSet,
    pub porosity: f64,
    pub releases: Vec<ReleaseGroup>,
    pub mode: Mode,
    pub output_times: OutputTimes,
    pub weak_sink: WeakSinkPolicy,
    /// Flow period durations; the last is `None`.
    pub periods: Vec<Option<f64>>,
    pub n_particles: usize,
    pub scale: f64,
    pub refine: usize,
    pub sigma2: f64,
    pub seed: u64,
    pub ts_count: usize,
    pub tc2: Tc2Options,
    pub warnings: Vec<String>,
}

impl ScenarioSpec {
    pub fn name(&self) -> &'static str {
        self.kind.as_str()
    }

    pub fn solve(&self, opts: &SolverOptions) -> Result<FlowSnapshot, ScenarioError> {
        let snap = solve_steady(self.grid.clone(), &self.conductivity, &self.bcs, opts)?;
        Ok(snap.with_porosity(Porosity::Uniform(self.porosity))?)
    }

    /// The piecewise-steady store: `snapshot` repeated for every period.
    pub fn store(&self, snapshot: &FlowSnapshot) -> Result<FlowStore, ScenarioError> {
        let snaps = self
            .periods
            .iter()
            .map(|d| snapshot.clone().with_duration(*d))
            .collect();
        Ok(FlowStore::new(snaps)?)
    }

    /// Replaces the release plan for a new particle count.
    pub fn set_particles(&mut self, n: usize) {
        self.n_particles = n;
        self.releases = match self.kind {
            ScenarioKind::Tc1 => tc1_releases(n, self.grid.extent()[1]),
            ScenarioKind::Tc2 => tc2_releases(n),
        };
    }

    /// Sets the number of output times (TC2 timeseries).
    pub fn set_ts_count(&mut self, count: usize) {
        self.ts_count = count;
        if let OutputTimes::Equispaced { total, .. } = self.output_times {
            self.output_times = OutputTimes::Equispaced { total, count };
        }
    }

    /// Canonical description of the flow problem.
    pub fn physics(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{} scale={} refine={} sigma2={} seed={} porosity={} wells={}",
            self.name(),
            self.scale,
            self.refine,
            self.sigma2,
            self.seed,
            self.porosity,
            self.tc2.wells
        );
        s
    }

    /// Default simulation configuration for this scenario.
    pub fn config(&self, out_dir: impl Into<std::path::PathBuf>) -> SimulationConfig {
        let mut c = SimulationConfig::new(self.mode, out_dir);
        c.output_times = self.output_times.clone();
        c.weak_sink = self.weak_sink;
        c.releases = self.releases.clone();
        c.seed = self.seed;
        c.physics = self.physics();
        c.schedule = ScheduleSpec::Static;
        c
    }
}

fn tc1_releases(n: usize, ly: f64) -> Vec<ReleaseGroup> {
    vec![ReleaseGroup {
        time: 0.0,
        count: n,
        group: 0,
        placement: Placement::LineY {
            x: TC1_RELEASE_X,
            z: 0.5 * TC1_CELL,
            y_min: 0.0,
            y_max: ly,
        },
    }]
}

fn tc2_releases(n: usize) -> Vec<ReleaseGroup> {
    let rect = Placement::TopRect {
        x_min: 0.0,
        x_max: 2.0 * TC2_CELL,
        y_min: (TC2_NY - 2) as f64 * TC2_CELL,
        y_max: TC2_NY as f64 * TC2_CELL,
    };
    (0..TC2_STAGES)
        .map(|s| ReleaseGroup {
            time: s as f64 * TC2_STAGE_INTERVAL,
            count: n / TC2_STAGES + usize::from(s < n % TC2_STAGES),
            group: s as u32,
            placement: rect.clone(),
        })
        .filter(|g| g.count > 0)
        .collect()
}

/// Builds and solves TC1.
pub fn build_tc1(
    sigma2: f64,
    n_particles: usize,
    seed: u64,
    scale: f64,
) -> Result<(ScenarioSpec, FlowSnapshot), ScenarioError> {
    let spec = tc1_spec(sigma2, n_particles, seed, scale)?;
    let snap = spec.solve(&SolverOptions::default())?;
    Ok((spec, snap))
}

/// TC1 definition without solving the flow.
pub fn tc1_spec(sigma2: f64, n_particles: usize, seed: u64, scale: f64) -> Result<ScenarioSpec, ScenarioError> {
    if !(0.0..=5.0).contains(&sigma2) {
        return Err(ScenarioError::Param(format!("sigma2 {sigma2} outside [0, 5]")));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(ScenarioError::Param(format!("scale {scale} outside (0, 1]")));
    }
    let nx = ((TC1_LX / TC1_CELL * scale).round() as usize).max(1);
    let ny = ((TC1_LY / TC1_CELL * scale).round() as usize).max(1);
    let grid = Arc::new(Grid::build_structured(
        nx,
        ny,
        1,
        TC1_CELL,
        TC1_CELL,
        &[TC1_CELL],
        [0.0; 3],
    )?);
    let [lx, ly, _] = grid.extent();
    let mut warnings = Vec::new();
    if lx < 10.0 * TC1_CORR_LEN {
        let w = format!("domain length {lx} m spans fewer than 10 correlation lengths");
        warn!("{w}");
        warnings.push(w);
    }
    if lx <= TC1_RELEASE_X {
        return Err(ScenarioError::Param(format!(
            "domain length {lx} m does not reach the release line"
        )));
    }
    let field = generate_field(nx, ny, TC1_CELL, TC1_CELL, TC1_CORR_LEN, seed)?;
    let k = scale_to_conductivity(&field, sigma2)?;
    let mut hb = Vec::with_capacity(2 * ny);
    for j in 0..ny {
        hb.push(HeadBoundary {
            cell: grid.cell_id(0, j, 0)?,
            face: Face::new(Axis::X, Side::Low),
            head: TC1_OUTLET_HEAD + lx,
        });
        hb.push(HeadBoundary {
            cell: grid.cell_id(nx - 1, j, 0)?,
            face: Face::new(Axis::X, Side::High),
            head: TC1_OUTLET_HEAD,
        });
    }
    Ok(ScenarioSpec {
        kind: ScenarioKind::Tc1,
        conductivity: ConductivityTensor::isotropic(k.k),
        bcs: BoundaryConditionSet {
            head_boundaries: hb,
            ..Default::default()
        },
        porosity: 1.0,
        releases: tc1_releases(n_particles, ly),
        grid,
        mode: Mode::Endpoint,
        output_times: OutputTimes::None,
        weak_sink: WeakSinkPolicy::PassThrough,
        periods: vec![None],
        n_particles,
        scale,
        refine: 1,
        sigma2,
        seed,
        ts_count: 0,
        tc2: Tc2Options::default(),
        warnings,
    })
}

/// Builds and solves TC2.
pub fn build_tc2(
    n_particles: usize,
    ts_count: usize,
    refine: usize,
    scale: f64,
) -> Result<(ScenarioSpec, FlowSnapshot), ScenarioError> {
    build_tc2_with(n_particles, ts_count, refine, scale, Tc2Options::default())
}

pub fn build_tc2_with(
    n_particles: usize,
    ts_count: usize,
    refine: usize,
    scale: f64,
    opts: Tc2Options,
) -> Result<(ScenarioSpec, FlowSnapshot), ScenarioError> {
    let spec = tc2_spec(n_particles, ts_count, refine, scale, opts)?;
    let snap = spec.solve(&SolverOptions::default())?;
    Ok((spec, snap))
}

pub fn tc2_spec(
    n_particles: usize,
    ts_count: usize,
    refine: usize,
    scale: f64,
    opts: Tc2Options,
) -> Result<ScenarioSpec, ScenarioError> {
    if refine == 0 {
        return Err(ScenarioError::Param("refine must be at least 1".into()));
    }
    if ts_count == 0 {
        return Err(ScenarioError::Param("ts_count must be at least 1".into()));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(ScenarioError::Param(format!("scale {scale} outside (0, 1]")));
    }
    let r = refine;
    let (nx, ny) = (TC2_NX * r, TC2_NY * r);
    let d = TC2_CELL / r as f64;
    let grid = Arc::new(Grid::build_structured(nx, ny, 3, d, d, &TC2_DZ, [0.0; 3])?);
    let n = grid.cell_count();
    let per_layer = grid.cells_per_layer();
    let mut kxx = Vec::with_capacity(n);
    let mut kzz = Vec::with_capacity(n);
    for k in 0..3 {
        kxx.extend(std::iter::repeat_n(TC2_KH[k], per_layer));
        kzz.extend(std::iter::repeat_n(TC2_KV[k], per_layer));
    }
    let conductivity = ConductivityTensor {
        kyy: kxx.clone(),
        kxx,
        kzz,
    };

    let top = 2;
    let mid = |k: usize| grid.z_edges()[k] + 0.5 * TC2_DZ[k];
    let mut wells = Vec::new();
    if opts.wells {
        for (p, k, rate) in [(TC2_W1_POINT, top, TC2_Q_W1), (TC2_W3_POINT, 0, TC2_Q_W3)] {
            let (cell, _) = grid.locate([p[0], p[1], mid(k)])?;
            wells.push(Well { cell, rate });
        }
    }
    let split = (r * r) as f64;
    let mut rivers = Vec::with_capacity(ny);
    for j in 0..ny {
        rivers.push(River {
            cell: grid.cell_id(nx - 1, j, top)?,
            stage: TC2_RIVER_STAGE,
            bottom: TC2_RIVER_BOTTOM,
            conductance: TC2_RIVER_COND * (r as f64) / split,
        });
    }
    let mut drains = Vec::new();
    for bi in TC2_DRAIN_COLS {
        for sj in 0..r {
            for si in 0..r {
                drains.push(Drain {
                    cell: grid.cell_id(bi * r + si, TC2_DRAIN_ROW * r + sj, top)?,
                    elevation: TC2_DRAIN_ELEV,
                    conductance: TC2_DRAIN_COND / split,
                });
            }
        }
    }
    let t_ts = TC2_T_TS * scale;
    Ok(ScenarioSpec {
        kind: ScenarioKind::Tc2,
        conductivity,
        bcs: BoundaryConditionSet {
            head_boundaries: Vec::new(),
            wells,
            recharge: vec![TC2_RECHARGE; per_layer],
            rivers,
            drains,
        },
        porosity: 1.0,
        releases: tc2_releases(n_particles),
        grid,
        mode: Mode::Timeseries,
        output_times: OutputTimes::Equispaced {
            total: t_ts,
            count: ts_count,
        },
        weak_sink: WeakSinkPolicy::PassThrough,
        periods: TC2_PERIODS.to_vec(),
        n_particles,
        scale,
        refine,
        sigma2: 0.0,
        seed: 0,
        ts_count,
        tc2: opts,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::SinkClass;
    use crate::grid::CellId;

    #[test]
    fn tc1_desk_scale_dimensions() {
        let s = tc1_spec(2.5, 100, 1, 0.2).unwrap();
        assert_eq!((s.grid.nx(), s.grid.ny()), (300, 60));
        assert_eq!(s.bcs.head_boundaries[0].head, 310.0);
        assert!(s.warnings.is_empty());
        let small = tc1_spec(0.0, 1, 1, 0.05).unwrap();
        assert_eq!(small.grid.nx(), 75);
        assert_eq!(small.warnings.len(), 1);
        assert!(tc1_spec(6.0, 1, 1, 0.2).is_err());
        assert!(tc1_spec(1.0, 1, 1, 0.0).is_err());
    }

    #[test]
    fn tc1_homogeneous_unit_gradient() {
        let (_, snap) = build_tc1(0.0, 10, 3, 0.1).unwrap();
        let g = snap.grid.clone();
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let c = g.cell_id(i, j, 0).unwrap();
                let expect = 10.0 + g.nx() as f64 - (i as f64 + 0.5);
                assert!(
                    (snap.heads[c.0] - expect).abs() < 1e-7,
                    "{} vs {expect}",
                    snap.heads[c.0]
                );
            }
        }
        let v = snap.face_velocities(CellId(0)).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-8 && (v[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn tc2_layout() {
        let s = tc2_spec(1000, 5, 1, 1.0, Tc2Options::default()).unwrap();
        assert_eq!(s.grid.cell_count(), 1260);
        assert_eq!(s.grid.cells_per_layer(), 420);
        assert_eq!(s.grid.top_elevation(), 350.0);
        let times: Vec<f64> = s.releases.iter().map(|g| g.time).collect();
        assert_eq!(times, (0..10).map(|k| 20.0 * k as f64).collect::<Vec<_>>());
        assert_eq!(s.releases.iter().map(|g| g.count).sum::<usize>(), 1000);
        let (i, j, k) = s.grid.ijk(s.bcs.wells[0].cell);
        assert_eq!((i, j, k), (9, 14, 2));
        let (i, j, k) = s.grid.ijk(s.bcs.wells[1].cell);
        assert_eq!((i, j, k), (12, 7, 0));
        let r2 = tc2_spec(1000, 5, 2, 1.0, Tc2Options::default()).unwrap();
        assert_eq!(r2.grid.cells_per_layer(), 1680);
        let (i, j, _) = r2.grid.ijk(r2.bcs.wells[0].cell);
        assert_eq!((i, j), (18, 28));
        let total_river: f64 = r2.bcs.rivers.iter().map(|r| r.conductance).sum();
        let base_river: f64 = s.bcs.rivers.iter().map(|r| r.conductance).sum();
        assert!((total_river - base_river).abs() < 1e-6);
    }

    #[test]
    fn tc2_solves_with_balance_and_sinks() {
        let (spec, snap) = build_tc2(100, 5, 1, 1.0).unwrap();
        assert!(snap.max_relative_imbalance() <= 1e-8);
        let (inflow, outflow) = snap.global_budget();
        assert!((inflow - outflow).abs() <= 1e-8 * inflow.max(outflow));
        let recharge = TC2_RECHARGE * 10500.0 * 10000.0;
        assert!(inflow >= recharge * (1.0 - 1e-12));
        let sinks = |snap: &FlowSnapshot| {
            (0..snap.grid.cell_count())
                .filter(|&c| snap.classify_cell(CellId(c)).unwrap() != SinkClass::NoSink)
                .count()
        };
        let (_, dry) = build_tc2_with(100, 5, 1, 1.0, Tc2Options { wells: false }).unwrap();
        assert!(sinks(&dry) < sinks(&snap));
        let store = spec.store(&snap).unwrap();
        assert_eq!(store.snapshots().len(), 12);
        assert!(store.horizon().is_infinite());
    }

    #[test]
    fn scenario_determinism() {
        let a = build_tc1(1.0, 10, 9, 0.05).unwrap();
        let b = build_tc1(1.0, 10, 9, 0.05).unwrap();
        assert_eq!(a, b);
    }
}
