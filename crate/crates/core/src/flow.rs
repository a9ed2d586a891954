//! Steady finite-difference flow and the shared flow-data store.
//!
//! The solver discretises `div(K grad h) + q = 0` with the usual cell-centred
//! 7-point stencil and harmonic-mean interblock conductances. Head-dependent
//! river and drain terms are linearised by an outer fixed-point loop over
//! their clamp states; each linear system is solved with conjugate gradients
//! preconditioned by a zero-fill incomplete Cholesky factorisation.
//!
//! Face flows are stored for every face of the lattice, hull faces included,
//! and are signed positive toward the +axis direction. Hull faces carry the
//! prescribed-head boundary exchange and the recharge entering through the
//! top of the domain; every other hull face is a no-flow face.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use log::debug;
use thiserror::Error;

use crate::grid::{Axis, CellId, Face, Grid, GridError, Side};

/// Relative per-cell imbalance tolerated in a converged snapshot.
pub const BALANCE_TOL: f64 = 1e-8;

const FILE_MAGIC: &str = "PTRACE-FLOW";
const FILE_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid boundary conditions: {0}")]
    BadBoundary(String),
    #[error("invalid conductivity: {0}")]
    BadConductivity(String),
    #[error("singular system: no prescribed head, river or active drain fixes the head level")]
    Singular,
    #[error("flow solver did not converge ({stage}); residual history {history:?}")]
    NotConverged { stage: &'static str, history: Vec<f64> },
    #[error("time {time} d lies beyond the last bounded stress period (ends at {end} d)")]
    TimeOutOfRange { time: f64, end: f64 },
    #[error("invalid flow store: {0}")]
    BadStore(String),
    #[error("porosity must lie in (0, 1] (got {0})")]
    BadPorosity(f64),
    #[error("flow file: unsupported version `{found}` (expected {FILE_VERSION})")]
    Version { found: String },
    #[error("flow file: missing section {0}")]
    MissingSection(String),
    #[error("flow file line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Principal hydraulic conductivities per cell (m/d).
#[derive(Debug, Clone, PartialEq)]
pub struct ConductivityTensor {
    pub kxx: Vec<f64>,
    pub kyy: Vec<f64>,
    pub kzz: Vec<f64>,
}

impl ConductivityTensor {
    pub fn isotropic(k: Vec<f64>) -> Self {
        ConductivityTensor {
            kxx: k.clone(),
            kyy: k.clone(),
            kzz: k,
        }
    }

    pub fn uniform(n: usize, k: f64) -> Self {
        Self::isotropic(vec![k; n])
    }

    fn validate(&self, n: usize) -> Result<(), FlowError> {
        for (name, v) in [("kxx", &self.kxx), ("kyy", &self.kyy), ("kzz", &self.kzz)] {
            if v.len() != n {
                return Err(FlowError::BadConductivity(format!(
                    "{name} has {} values for {n} cells",
                    v.len()
                )));
            }
            if let Some(bad) = v.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
                return Err(FlowError::BadConductivity(format!(
                    "{name} contains non-positive value {bad}"
                )));
            }
        }
        Ok(())
    }
}

/// Prescribed head applied on a hull face of `cell`, half a cell away from
/// its centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadBoundary {
    pub cell: CellId,
    pub face: Face,
    pub head: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Well {
    pub cell: CellId,
    /// Positive injects, negative extracts (m^3/d).
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct River {
    pub cell: CellId,
    pub stage: f64,
    pub bottom: f64,
    pub conductance: f64,
}

impl River {
    /// Flow from the river into the aquifer (m^3/d).
    pub fn flow(&self, head: f64) -> f64 {
        if head > self.bottom {
            self.conductance * (self.stage - head)
        } else {
            self.conductance * (self.stage - self.bottom)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drain {
    pub cell: CellId,
    pub elevation: f64,
    pub conductance: f64,
}

impl Drain {
    /// Flow into the aquifer (never positive).
    pub fn flow(&self, head: f64) -> f64 {
        if head > self.elevation {
            self.conductance * (self.elevation - head)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundaryConditionSet {
    pub head_boundaries: Vec<HeadBoundary>,
    pub wells: Vec<Well>,
    /// Recharge flux per top-layer column (m/d), row-major `j * nx + i`.
    /// Empty means no recharge.
    pub recharge: Vec<f64>,
    pub rivers: Vec<River>,
    pub drains: Vec<Drain>,
}

impl BoundaryConditionSet {
    fn validate(&self, grid: &Grid) -> Result<(), FlowError> {
        if self.head_boundaries.is_empty() && self.rivers.is_empty() && self.drains.is_empty() {
            return Err(FlowError::BadBoundary(
                "at least one prescribed-head or head-dependent condition is required".into(),
            ));
        }
        for hb in &self.head_boundaries {
            grid.check(hb.cell)?;
            if grid.neighbor_unchecked(hb.cell, hb.face).is_some() {
                return Err(FlowError::BadBoundary(format!(
                    "head boundary on interior face {} of cell {}",
                    hb.face, hb.cell
                )));
            }
        }
        for w in &self.wells {
            grid.check(w.cell)?;
        }
        for r in &self.rivers {
            grid.check(r.cell)?;
            if !(r.conductance >= 0.0) {
                return Err(FlowError::BadBoundary("negative river conductance".into()));
            }
        }
        for d in &self.drains {
            grid.check(d.cell)?;
            if !(d.conductance >= 0.0) {
                return Err(FlowError::BadBoundary("negative drain conductance".into()));
            }
        }
        if !self.recharge.is_empty() && self.recharge.len() != grid.cells_per_layer() {
            return Err(FlowError::BadBoundary(format!(
                "recharge has {} values for {} top cells",
                self.recharge.len(),
                grid.cells_per_layer()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Relative per-cell residual required of each linear solve.
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Outer convergence threshold on the head change (m).
    pub head_change_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_outer: 50,
            max_inner: 100_000,
            head_change_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Porosity {
    Uniform(f64),
    PerCell(Vec<f64>),
}

impl Porosity {
    #[inline]
    pub fn at(&self, cell: CellId) -> f64 {
        match self {
            Porosity::Uniform(p) => *p,
            Porosity::PerCell(v) => v[cell.0],
        }
    }
}

/// Steady flow solution for one stress period.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSnapshot {
    pub grid: Arc<Grid>,
    pub heads: Vec<f64>,
    /// `(nx + 1) * ny * nz` flows through x-normal faces.
    pub flow_x: Vec<f64>,
    /// `nx * (ny + 1) * nz` flows through y-normal faces.
    pub flow_y: Vec<f64>,
    /// `nx * ny * (nz + 1)` flows through z-normal faces.
    pub flow_z: Vec<f64>,
    /// Net cell-internal source (+) or sink (-) from wells, rivers and drains.
    pub cell_source_sink: Vec<f64>,
    pub porosity: Porosity,
    /// Stress-period length (d); `None` for a final unbounded period.
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SinkClass {
    NoSink,
    WeakSink,
    StrongSink,
}

impl fmt::Display for SinkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SinkClass::NoSink => "no_sink",
            SinkClass::WeakSink => "weak_sink",
            SinkClass::StrongSink => "strong_sink",
        })
    }
}

#[inline]
fn face_slot(grid: &Grid, cell: CellId, face: Face) -> usize {
    let (i, j, k) = grid.ijk(cell);
    let (nx, ny) = (grid.nx(), grid.ny());
    let hi = face.side as usize;
    match face.axis {
        Axis::X => i + hi + (nx + 1) * (j + ny * k),
        Axis::Y => i + nx * (j + hi + (ny + 1) * k),
        Axis::Z => i + nx * (j + ny * (k + hi)),
    }
}

/// Interblock conductance from the harmonic mean of the two half cells.
pub fn interface_conductance(k1: f64, len1: f64, k2: f64, len2: f64, area: f64) -> f64 {
    area / (0.5 * len1 / k1 + 0.5 * len2 / k2)
}

impl FlowSnapshot {
    pub fn face_array(&self, axis: Axis) -> &[f64] {
        match axis {
            Axis::X => &self.flow_x,
            Axis::Y => &self.flow_y,
            Axis::Z => &self.flow_z,
        }
    }

    fn face_array_mut(&mut self, axis: Axis) -> &mut Vec<f64> {
        match axis {
            Axis::X => &mut self.flow_x,
            Axis::Y => &mut self.flow_y,
            Axis::Z => &mut self.flow_z,
        }
    }

    /// Flow through `face` of `cell`, positive toward +axis.
    #[inline]
    pub fn face_flow(&self, cell: CellId, face: Face) -> f64 {
        self.face_array(face.axis)[face_slot(&self.grid, cell, face)]
    }

    pub fn set_face_flow(&mut self, cell: CellId, face: Face, value: f64) {
        let slot = face_slot(&self.grid, cell, face);
        self.face_array_mut(face.axis)[slot] = value;
    }

    /// Outward-signed flow through a hull face of `cell`.
    pub fn boundary_face_flow(&self, cell: CellId, face: Face) -> Option<f64> {
        if self.grid.neighbor_unchecked(cell, face).is_some() {
            return None;
        }
        let q = self.face_flow(cell, face);
        Some(match face.side {
            Side::Low => -q,
            Side::High => q,
        })
    }

    /// Net inflow minus outflow plus internal source for one cell; zero for
    /// an exactly balanced cell.
    pub fn cell_mass_balance(&self, cell: CellId) -> f64 {
        let mut net = self.cell_source_sink[cell.0];
        for axis in Axis::ALL {
            net += self.face_flow(cell, Face::new(axis, Side::Low)) - self.face_flow(cell, Face::new(axis, Side::High));
        }
        net
    }

    /// Sum of absolute face flows and internal source of one cell.
    pub fn cell_throughput(&self, cell: CellId) -> f64 {
        Face::ALL.iter().map(|&f| self.face_flow(cell, f).abs()).sum::<f64>() + self.cell_source_sink[cell.0].abs()
    }

    /// Largest `|balance| / throughput` over all cells. Cells with negligible
    /// throughput are measured against `1e-12` of the largest throughput.
    pub fn max_relative_imbalance(&self) -> f64 {
        relative_imbalance(self)
    }

    /// `(hull inflow + sources, hull outflow + sinks)` over the domain.
    pub fn global_budget(&self) -> (f64, f64) {
        let g = &self.grid;
        let mut inflow = 0.0;
        let mut outflow = 0.0;
        for c in 0..g.cell_count() {
            let cell = CellId(c);
            for face in Face::ALL {
                if let Some(q) = self.boundary_face_flow(cell, face) {
                    if q > 0.0 {
                        outflow += q;
                    } else {
                        inflow -= q;
                    }
                }
            }
            let s = self.cell_source_sink[c];
            if s > 0.0 {
                inflow += s;
            } else {
                outflow -= s;
            }
        }
        (inflow, outflow)
    }

    /// Seepage velocities on the six faces, ordered
    /// `[x_low, x_high, y_low, y_high, z_low, z_high]`, positive toward +axis.
    pub fn face_velocities(&self, cell: CellId) -> Result<[f64; 6], FlowError> {
        self.grid.check(cell)?;
        Ok(self.face_velocities_unchecked(cell))
    }

    #[inline]
    fn face_velocities_unchecked(&self, cell: CellId) -> [f64; 6] {
        let theta = self.porosity.at(cell);
        let mut v = [0.0; 6];
        for face in Face::ALL {
            let area = self.grid.face_area(cell, face.axis);
            v[face.index()] = self.face_flow(cell, face) / (area * theta);
        }
        v
    }

    pub fn classify_cell(&self, cell: CellId) -> Result<SinkClass, FlowError> {
        self.grid.check(cell)?;
        Ok(self.classify_unchecked(cell))
    }

    fn classify_unchecked(&self, cell: CellId) -> SinkClass {
        let sink = -self.cell_source_sink[cell.0];
        if sink <= 0.0 {
            return SinkClass::NoSink;
        }
        let outflow = Face::ALL.iter().any(|&f| {
            let q = self.face_flow(cell, f);
            match f.side {
                Side::Low => q < 0.0,
                Side::High => q > 0.0,
            }
        });
        if outflow {
            SinkClass::WeakSink
        } else {
            SinkClass::StrongSink
        }
    }

    pub fn with_porosity(mut self, porosity: Porosity) -> Result<Self, FlowError> {
        let check = |p: f64| {
            if p > 0.0 && p <= 1.0 {
                Ok(())
            } else {
                Err(FlowError::BadPorosity(p))
            }
        };
        match &porosity {
            Porosity::Uniform(p) => check(*p)?,
            Porosity::PerCell(v) => {
                if v.len() != self.grid.cell_count() {
                    return Err(FlowError::BadStore(format!(
                        "porosity has {} values for {} cells",
                        v.len(),
                        self.grid.cell_count()
                    )));
                }
                v.iter().try_for_each(|&p| check(p))?;
            }
        }
        self.porosity = porosity;
        Ok(self)
    }

    pub fn with_duration(mut self, duration: Option<f64>) -> Self {
        self.duration = duration;
        self
    }
}

fn relative_imbalance(s: &FlowSnapshot) -> f64 {
    let n = s.grid.cell_count();
    let throughput: Vec<f64> = (0..n).map(|c| s.cell_throughput(CellId(c))).collect();
    let floor = 1e-12 * throughput.iter().cloned().fold(0.0, f64::max);
    (0..n)
        .map(|c| s.cell_mass_balance(CellId(c)).abs() / throughput[c].max(floor).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Linear system `A h = b` for a fixed set of clamp states.
struct System<'g> {
    grid: &'g Grid,
    /// Interblock conductances in face-array layout; hull entries are zero.
    cx: Vec<f64>,
    cy: Vec<f64>,
    cz: Vec<f64>,
    /// Diagonal contribution from interblock terms and prescribed heads.
    base_diag: Vec<f64>,
    base_rhs: Vec<f64>,
    /// Conductance of each prescribed-head face.
    head_cond: Vec<f64>,
}

impl<'g> System<'g> {
    fn assemble(grid: &'g Grid, k: &ConductivityTensor, bcs: &BoundaryConditionSet) -> System<'g> {
        let (nx, ny, nz) = (grid.nx(), grid.ny(), grid.nz());
        let n = grid.cell_count();
        let mut cx = vec![0.0; (nx + 1) * ny * nz];
        let mut cy = vec![0.0; nx * (ny + 1) * nz];
        let mut cz = vec![0.0; nx * ny * (nz + 1)];
        let mut diag = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for c in 0..n {
            let cell = CellId(c);
            let (i, j, kk) = grid.ijk(cell);
            let size = grid.cell_size(cell);
            if i + 1 < nx {
                let other = c + 1;
                let cond =
                    interface_conductance(k.kxx[c], size[0], k.kxx[other], size[0], grid.face_area(cell, Axis::X));
                cx[face_slot(grid, cell, Face::new(Axis::X, Side::High))] = cond;
                diag[c] += cond;
                diag[other] += cond;
            }
            if j + 1 < ny {
                let other = c + nx;
                let cond =
                    interface_conductance(k.kyy[c], size[1], k.kyy[other], size[1], grid.face_area(cell, Axis::Y));
                cy[face_slot(grid, cell, Face::new(Axis::Y, Side::High))] = cond;
                diag[c] += cond;
                diag[other] += cond;
            }
            if kk + 1 < nz {
                let other = c + nx * ny;
                let cond = interface_conductance(
                    k.kzz[c],
                    size[2],
                    k.kzz[other],
                    grid.dz()[kk + 1],
                    grid.face_area(cell, Axis::Z),
                );
                cz[face_slot(grid, cell, Face::new(Axis::Z, Side::High))] = cond;
                diag[c] += cond;
                diag[other] += cond;
            }
        }
        let mut head_cond = Vec::with_capacity(bcs.head_boundaries.len());
        for hb in &bcs.head_boundaries {
            let c = hb.cell.0;
            let axis = hb.face.axis;
            let kk = match axis {
                Axis::X => k.kxx[c],
                Axis::Y => k.kyy[c],
                Axis::Z => k.kzz[c],
            };
            let len = grid.cell_size(hb.cell)[axis.index()];
            let cond = grid.face_area(hb.cell, axis) * kk / (0.5 * len);
            diag[c] += cond;
            rhs[c] += cond * hb.head;
            head_cond.push(cond);
        }
        for w in &bcs.wells {
            rhs[w.cell.0] += w.rate;
        }
        if !bcs.recharge.is_empty() {
            let top = grid.cells_per_layer() * (nz - 1);
            let area = grid.dx() * grid.dy();
            for (col, q) in bcs.recharge.iter().enumerate() {
                rhs[top + col] += q * area;
            }
        }
        System {
            grid,
            cx,
            cy,
            cz,
            base_diag: diag,
            base_rhs: rhs,
            head_cond,
        }
    }

    /// `y = A x` with `diag` the full diagonal.
    fn apply(&self, diag: &[f64], x: &[f64], y: &mut [f64]) {
        let g = self.grid;
        let (nx, ny, nz) = (g.nx(), g.ny(), g.nz());
        let layer = nx * ny;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = i + nx * (j + ny * k);
                    let mut v = diag[c] * x[c];
                    let fx = i + (nx + 1) * (j + ny * k);
                    if i > 0 {
                        v -= self.cx[fx] * x[c - 1];
                    }
                    if i + 1 < nx {
                        v -= self.cx[fx + 1] * x[c + 1];
                    }
                    let fy = i + nx * (j + (ny + 1) * k);
                    if j > 0 {
                        v -= self.cy[fy] * x[c - nx];
                    }
                    if j + 1 < ny {
                        v -= self.cy[fy + nx] * x[c + nx];
                    }
                    if k > 0 {
                        v -= self.cz[c] * x[c - layer];
                    }
                    if k + 1 < nz {
                        v -= self.cz[c + layer] * x[c + layer];
                    }
                    y[c] = v;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClampState {
    Linear,
    Clamped,
}

fn river_state(r: &River, h: f64) -> ClampState {
    if h > r.bottom {
        ClampState::Linear
    } else {
        ClampState::Clamped
    }
}

fn drain_state(d: &Drain, h: f64) -> ClampState {
    if h > d.elevation {
        ClampState::Linear
    } else {
        ClampState::Clamped
    }
}

/// Solves the steady flow problem and returns face flows with uniform
/// porosity 1 and an unbounded duration.
pub fn solve_steady(
    grid: Arc<Grid>,
    conductivity: &ConductivityTensor,
    bcs: &BoundaryConditionSet,
    opts: &SolverOptions,
) -> Result<FlowSnapshot, FlowError> {
    conductivity.validate(grid.cell_count())?;
    bcs.validate(&grid)?;
    let n = grid.cell_count();
    let system = System::assemble(&grid, conductivity, bcs);

    // Initial guess: mean of the reference levels.
    let refs: Vec<f64> = bcs
        .head_boundaries
        .iter()
        .map(|h| h.head)
        .chain(bcs.rivers.iter().map(|r| r.stage))
        .chain(bcs.drains.iter().map(|d| d.elevation))
        .collect();
    let start = refs.iter().sum::<f64>() / refs.len() as f64;
    let mut heads = vec![start; n];
    let mut river_states: Vec<ClampState> = bcs.rivers.iter().map(|r| river_state(r, start)).collect();
    let mut drain_states: Vec<ClampState> = bcs.drains.iter().map(|d| drain_state(d, start)).collect();

    let mut history = Vec::new();
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut converged = false;
    for _ in 0..opts.max_outer {
        diag.copy_from_slice(&system.base_diag);
        rhs.copy_from_slice(&system.base_rhs);
        let mut anchored = !bcs.head_boundaries.is_empty();
        for (r, s) in bcs.rivers.iter().zip(&river_states) {
            match s {
                ClampState::Linear => {
                    diag[r.cell.0] += r.conductance;
                    rhs[r.cell.0] += r.conductance * r.stage;
                    anchored |= r.conductance > 0.0;
                }
                ClampState::Clamped => rhs[r.cell.0] += r.conductance * (r.stage - r.bottom),
            }
        }
        for (d, s) in bcs.drains.iter().zip(&drain_states) {
            if *s == ClampState::Linear {
                diag[d.cell.0] += d.conductance;
                rhs[d.cell.0] += d.conductance * d.elevation;
                anchored |= d.conductance > 0.0;
            }
        }
        if !anchored {
            return Err(FlowError::Singular);
        }
        let previous = heads.clone();
        let inner = pcg(&system, &diag, &rhs, &mut heads, opts)?;
        history.push(inner);

        let new_rivers: Vec<ClampState> = bcs.rivers.iter().map(|r| river_state(r, heads[r.cell.0])).collect();
        let new_drains: Vec<ClampState> = bcs.drains.iter().map(|d| drain_state(d, heads[d.cell.0])).collect();
        let change = heads
            .iter()
            .zip(&previous)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let stable = new_rivers == river_states && new_drains == drain_states;
        river_states = new_rivers;
        drain_states = new_drains;
        if stable && change < opts.head_change_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FlowError::NotConverged {
            stage: "outer clamp iteration",
            history,
        });
    }
    Ok(build_snapshot(grid.clone(), &system, bcs, heads))
}

fn build_snapshot(grid: Arc<Grid>, system: &System<'_>, bcs: &BoundaryConditionSet, heads: Vec<f64>) -> FlowSnapshot {
    let g = &*grid;
    let (nx, ny, nz) = (g.nx(), g.ny(), g.nz());
    let n = g.cell_count();
    let mut s = FlowSnapshot {
        grid: grid.clone(),
        heads: Vec::new(),
        flow_x: vec![0.0; (nx + 1) * ny * nz],
        flow_y: vec![0.0; nx * (ny + 1) * nz],
        flow_z: vec![0.0; nx * ny * (nz + 1)],
        cell_source_sink: vec![0.0; n],
        porosity: Porosity::Uniform(1.0),
        duration: None,
    };
    for c in 0..n {
        let cell = CellId(c);
        for axis in Axis::ALL {
            let high = Face::new(axis, Side::High);
            if let Some(other) = g.neighbor_unchecked(cell, high) {
                let slot = face_slot(g, cell, high);
                let cond = match axis {
                    Axis::X => system.cx[slot],
                    Axis::Y => system.cy[slot],
                    Axis::Z => system.cz[slot],
                };
                s.face_array_mut(axis)[slot] = cond * (heads[c] - heads[other.0]);
            }
        }
    }
    for (hb, cond) in bcs.head_boundaries.iter().zip(&system.head_cond) {
        let h = heads[hb.cell.0];
        let q = match hb.face.side {
            Side::Low => cond * (hb.head - h),
            Side::High => cond * (h - hb.head),
        };
        let slot = face_slot(g, hb.cell, hb.face);
        s.face_array_mut(hb.face.axis)[slot] += q;
    }
    if !bcs.recharge.is_empty() {
        let area = g.dx() * g.dy();
        let top = g.cells_per_layer() * (nz - 1);
        for (col, q) in bcs.recharge.iter().enumerate() {
            let cell = CellId(top + col);
            let slot = face_slot(g, cell, Face::new(Axis::Z, Side::High));
            s.flow_z[slot] -= q * area;
        }
    }
    for w in &bcs.wells {
        s.cell_source_sink[w.cell.0] += w.rate;
    }
    for r in &bcs.rivers {
        s.cell_source_sink[r.cell.0] += r.flow(heads[r.cell.0]);
    }
    for d in &bcs.drains {
        s.cell_source_sink[d.cell.0] += d.flow(heads[d.cell.0]);
    }
    s.heads = heads;
    s
}

/// Zero-fill incomplete Cholesky factor of the 7-point matrix, stored as the
/// reciprocal pivots; the off-diagonals are the system conductances.
const MIC_RELAX: f64 = 0.97;

struct Ic0 {
    inv_pivot: Vec<f64>,
}

impl Ic0 {
    fn new(system: &System<'_>, diag: &[f64]) -> Ic0 {
        let g = system.grid;
        let (nx, ny, nz) = (g.nx(), g.ny(), g.nz());
        let layer = nx * ny;
        let n = diag.len();
        // Couplings of each cell to its higher-indexed neighbours.
        let mut upper = vec![0.0; n];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = i + nx * (j + ny * k);
                    let mut u = 0.0;
                    if i + 1 < nx {
                        u += system.cx[i + 1 + (nx + 1) * (j + ny * k)];
                    }
                    if j + 1 < ny {
                        u += system.cy[i + nx * (j + 1 + (ny + 1) * k)];
                    }
                    if k + 1 < nz {
                        u += system.cz[c + layer];
                    }
                    upper[c] = u;
                }
            }
        }
        let mut inv_pivot = vec![0.0; n];
        // Dropped fill is partially lumped onto the pivot (modified IC).
        let lump = |a: f64, m: usize, inv: &[f64]| a * ((1.0 - MIC_RELAX) * a + MIC_RELAX * upper[m]) * inv[m];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = i + nx * (j + ny * k);
                    let mut d = diag[c];
                    if i > 0 {
                        d -= lump(system.cx[i + (nx + 1) * (j + ny * k)], c - 1, &inv_pivot);
                    }
                    if j > 0 {
                        d -= lump(system.cy[i + nx * (j + (ny + 1) * k)], c - nx, &inv_pivot);
                    }
                    if k > 0 {
                        d -= lump(system.cz[c], c - layer, &inv_pivot);
                    }
                    // Breakdown guard: fall back to the Jacobi pivot.
                    if !(d > 1e-3 * diag[c]) {
                        d = diag[c];
                    }
                    inv_pivot[c] = 1.0 / d;
                }
            }
        }
        Ic0 { inv_pivot }
    }

    /// `z = M^-1 r` by a forward and a backward sweep.
    fn apply(&self, system: &System<'_>, r: &[f64], z: &mut [f64]) {
        let g = system.grid;
        let (nx, ny, nz) = (g.nx(), g.ny(), g.nz());
        let layer = nx * ny;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = i + nx * (j + ny * k);
                    let mut v = r[c];
                    if i > 0 {
                        v += system.cx[i + (nx + 1) * (j + ny * k)] * z[c - 1];
                    }
                    if j > 0 {
                        v += system.cy[i + nx * (j + (ny + 1) * k)] * z[c - nx];
                    }
                    if k > 0 {
                        v += system.cz[c] * z[c - layer];
                    }
                    z[c] = v * self.inv_pivot[c];
                }
            }
        }
        for k in (0..nz).rev() {
            for j in (0..ny).rev() {
                for i in (0..nx).rev() {
                    let c = i + nx * (j + ny * k);
                    let mut v = 0.0;
                    if i + 1 < nx {
                        v += system.cx[i + 1 + (nx + 1) * (j + ny * k)] * z[c + 1];
                    }
                    if j + 1 < ny {
                        v += system.cy[i + nx * (j + 1 + (ny + 1) * k)] * z[c + nx];
                    }
                    if k + 1 < nz {
                        v += system.cz[c + layer] * z[c + layer];
                    }
                    z[c] += v * self.inv_pivot[c];
                }
            }
        }
    }
}

/// Incomplete-Cholesky preconditioned CG. Stops once every cell balances to `opts.tol`
/// relative to its throughput. Returns the final relative residual norm.
fn pcg(system: &System<'_>, diag: &[f64], rhs: &[f64], x: &mut [f64], opts: &SolverOptions) -> Result<f64, FlowError> {
    let n = x.len();
    let mut r = vec![0.0; n];
    let mut q = vec![0.0; n];
    system.apply(diag, x, &mut q);
    for c in 0..n {
        r[c] = rhs[c] - q[c];
    }
    let b_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let precond = Ic0::new(system, diag);
    let mut z = vec![0.0; n];
    precond.apply(system, &r, &mut z);
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut history = Vec::new();
    let mut check_below = opts.tol;

    for it in 0..=opts.max_inner {
        let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = r_norm / b_norm;
        if it % 100 == 0 {
            history.push(rel);
        }
        if rel <= check_below || r_norm == 0.0 {
            // Recompute the true residual and test the per-cell criterion.
            system.apply(diag, x, &mut q);
            for c in 0..n {
                r[c] = rhs[c] - q[c];
            }
            let imbalance = cellwise_imbalance(system, diag, rhs, x);
            if imbalance <= opts.tol {
                return Ok(rel);
            }
            if rel <= 1e-3 * f64::EPSILON {
                // Round-off floor: accept what double precision allows as
                // long as the snapshot balance tolerance holds.
                if imbalance <= BALANCE_TOL {
                    debug!("cell balance {imbalance:e} at the precision floor");
                    return Ok(rel);
                }
                break;
            }
            check_below = 0.1 * rel;
            // Restart from the true residual.
            precond.apply(system, &r, &mut z);
            p.copy_from_slice(&z);
            rz = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            if rz == 0.0 {
                break;
            }
        }
        if it == opts.max_inner {
            break;
        }
        system.apply(diag, &p, &mut q);
        let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        if pq <= 0.0 {
            break;
        }
        let alpha = rz / pq;
        for c in 0..n {
            x[c] += alpha * p[c];
            r[c] -= alpha * q[c];
        }
        precond.apply(system, &r, &mut z);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for c in 0..n {
            p[c] = z[c] + beta * p[c];
        }
    }
    Err(FlowError::NotConverged {
        stage: "inner conjugate gradient",
        history,
    })
}

/// Largest per-cell `|imbalance| / throughput`, with flows evaluated from
/// head differences as in the final snapshot. Cells with negligible
/// throughput are measured against `1e-12` of the largest throughput.
fn cellwise_imbalance(system: &System<'_>, diag: &[f64], rhs: &[f64], x: &[f64]) -> f64 {
    let g = system.grid;
    let n = x.len();
    let mut net = vec![0.0; n];
    let mut through = vec![0.0; n];
    for c in 0..n {
        let cell = CellId(c);
        let mut interblock_diag = 0.0;
        for face in Face::ALL {
            if let Some(other) = g.neighbor_unchecked(cell, face) {
                let slot = face_slot(g, cell, face);
                let cond = match face.axis {
                    Axis::X => system.cx[slot],
                    Axis::Y => system.cy[slot],
                    Axis::Z => system.cz[slot],
                };
                interblock_diag += cond;
                let q = cond * (x[other.0] - x[c]);
                net[c] += q;
                through[c] += q.abs();
            }
        }
        // Everything else: prescribed heads, recharge, wells, rivers, drains.
        let external = rhs[c] - (diag[c] - interblock_diag) * x[c];
        net[c] += external;
        through[c] += external.abs();
    }
    let floor = 1e-12 * through.iter().cloned().fold(0.0, f64::max);
    (0..n)
        .map(|c| net[c].abs() / through[c].max(floor).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Ordered steady snapshots shared read-only by every tracking worker.
#[derive(Debug, Clone)]
pub struct FlowStore {
    grid: Arc<Grid>,
    snapshots: Vec<FlowSnapshot>,
    starts: Vec<f64>,
}

impl FlowStore {
    pub fn new(snapshots: Vec<FlowSnapshot>) -> Result<FlowStore, FlowError> {
        let first = snapshots
            .first()
            .ok_or_else(|| FlowError::BadStore("no snapshots".into()))?;
        let grid = first.grid.clone();
        let mut starts = Vec::with_capacity(snapshots.len());
        let mut t = 0.0;
        for (idx, s) in snapshots.iter().enumerate() {
            if *s.grid != *grid {
                return Err(FlowError::BadStore(format!("snapshot {idx} uses a different grid")));
            }
            starts.push(t);
            match s.duration {
                Some(d) if d.is_finite() && d > 0.0 => t += d,
                Some(d) => return Err(FlowError::BadStore(format!("snapshot {idx} has invalid duration {d}"))),
                None if idx + 1 < snapshots.len() => {
                    return Err(FlowError::BadStore(format!(
                        "only the final snapshot may be unbounded (snapshot {idx})"
                    )))
                }
                None => {}
            }
        }
        Ok(FlowStore {
            grid,
            snapshots,
            starts,
        })
    }

    pub fn single(snapshot: FlowSnapshot) -> Result<FlowStore, FlowError> {
        Self::new(vec![snapshot])
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn snapshots(&self) -> &[FlowSnapshot] {
        &self.snapshots
    }

    pub fn start(&self, period: usize) -> f64 {
        self.starts[period]
    }

    /// End of a period, `INFINITY` when unbounded.
    pub fn end(&self, period: usize) -> f64 {
        match self.snapshots[period].duration {
            Some(d) => self.starts[period] + d,
            None => f64::INFINITY,
        }
    }

    /// End of the last period.
    pub fn horizon(&self) -> f64 {
        self.end(self.snapshots.len() - 1)
    }

    /// Period active at `time`; a time on a period boundary selects the later
    /// period.
    pub fn period_at(&self, time: f64) -> Result<usize, FlowError> {
        let horizon = self.horizon();
        if time > horizon {
            return Err(FlowError::TimeOutOfRange { time, end: horizon });
        }
        let idx = self.starts.partition_point(|&s| s <= time);
        Ok(idx.saturating_sub(1).min(self.snapshots.len() - 1))
    }

    pub fn face_velocities(&self, cell: CellId, time: f64) -> Result<[f64; 6], FlowError> {
        self.snapshots[self.period_at(time)?].face_velocities(cell)
    }

    pub fn classify_cell(&self, cell: CellId, time: f64) -> Result<SinkClass, FlowError> {
        self.snapshots[self.period_at(time)?].classify_cell(cell)
    }
}

/// Per-cell velocities and sink classes of the active snapshot, rebuilt in
/// the serial section each time the flow period changes.
#[derive(Debug)]
pub struct FlowView {
    grid: Arc<Grid>,
    velocities: Vec<[f64; 6]>,
    sinks: Vec<SinkClass>,
}

impl FlowView {
    pub fn build(snapshot: &FlowSnapshot) -> FlowView {
        let n = snapshot.grid.cell_count();
        let mut velocities = Vec::with_capacity(n);
        let mut sinks = Vec::with_capacity(n);
        for c in 0..n {
            velocities.push(snapshot.face_velocities_unchecked(CellId(c)));
            sinks.push(snapshot.classify_unchecked(CellId(c)));
        }
        FlowView {
            grid: snapshot.grid.clone(),
            velocities,
            sinks,
        }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn velocities(&self, cell: CellId) -> &[f64; 6] {
        &self.velocities[cell.0]
    }

    #[inline]
    pub fn sink(&self, cell: CellId) -> SinkClass {
        self.sinks[cell.0]
    }
    /// True when both views move particles identically (bitwise equal
    /// velocities and sink classes on the same grid).
    pub fn same_field(&self, other: &FlowView) -> bool {
        *self.grid == *other.grid
            && self.sinks == other.sinks
            && self
                .velocities
                .iter()
                .zip(&other.velocities)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

// ---------------------------------------------------------------------------
// Snapshot files
// ---------------------------------------------------------------------------

fn write_array(w: &mut impl Write, label: &str, values: &[f64]) -> io::Result<()> {
    writeln!(w, "{label} {}", values.len())?;
    for v in values {
        writeln!(w, "{v:.16e}")?;
    }
    Ok(())
}

/// Writes a snapshot as versioned ASCII with 17 significant digits.
pub fn save_snapshot(snapshot: &FlowSnapshot, path: &Path) -> Result<(), FlowError> {
    let g = &snapshot.grid;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{FILE_MAGIC} {FILE_VERSION}")?;
    writeln!(w, "DIMS {} {} {}", g.nx(), g.ny(), g.nz())?;
    writeln!(w, "SPACING {:.16e} {:.16e}", g.dx(), g.dy())?;
    write!(w, "DZ")?;
    for d in g.dz() {
        write!(w, " {d:.16e}")?;
    }
    writeln!(w)?;
    let o = g.origin();
    writeln!(w, "ORIGIN {:.16e} {:.16e} {:.16e}", o[0], o[1], o[2])?;
    match &snapshot.porosity {
        Porosity::Uniform(p) => writeln!(w, "POROSITY_CONST {p:.16e}")?,
        Porosity::PerCell(_) => writeln!(w, "POROSITY_ARRAY")?,
    }
    match snapshot.duration {
        Some(d) => writeln!(w, "PERIOD 0 {d:.16e}")?,
        None => writeln!(w, "PERIOD 0 inf")?,
    }
    write_array(&mut w, "HEADS", &snapshot.heads)?;
    write_array(&mut w, "FACEFLOW_X", &snapshot.flow_x)?;
    write_array(&mut w, "FACEFLOW_Y", &snapshot.flow_y)?;
    write_array(&mut w, "FACEFLOW_Z", &snapshot.flow_z)?;
    write_array(&mut w, "CELL_SRCSNK", &snapshot.cell_source_sink)?;
    if let Porosity::PerCell(v) = &snapshot.porosity {
        write_array(&mut w, "POROSITY", v)?;
    }
    w.flush()?;
    Ok(())
}

struct LineReader<R> {
    lines: io::Lines<R>,
    line: usize,
}

impl<R: BufRead> LineReader<R> {
    fn next(&mut self, section: &str) -> Result<String, FlowError> {
        match self.lines.next() {
            Some(l) => {
                self.line += 1;
                Ok(l?)
            }
            None => Err(FlowError::MissingSection(section.to_string())),
        }
    }

    fn malformed(&self, msg: impl Into<String>) -> FlowError {
        FlowError::Malformed {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<String>, FlowError> {
        let l = self.next(key)?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.malformed(format!("expected {key}, found `{l}`")));
        }
        Ok(parts.map(str::to_string).collect())
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T, FlowError> {
        s.parse().map_err(|_| self.malformed(format!("cannot parse `{s}`")))
    }

    fn array(&mut self, label: &str, expected: usize) -> Result<Vec<f64>, FlowError> {
        let parts = self.keyed(label)?;
        let count: usize = match parts.first() {
            Some(s) => self.num(s)?,
            None => return Err(self.malformed(format!("{label} without count"))),
        };
        if count != expected {
            return Err(self.malformed(format!("{label} holds {count} values, grid needs {expected}")));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let l = self.next(label)?;
            out.push(self.num(l.trim())?);
        }
        Ok(out)
    }
}

pub fn load_snapshot(path: &Path) -> Result<FlowSnapshot, FlowError> {
    let mut r = LineReader {
        lines: BufReader::new(File::open(path)?).lines(),
        line: 0,
    };
    let head = r.next("header")?;
    let mut parts = head.split_whitespace();
    if parts.next() != Some(FILE_MAGIC) {
        return Err(r.malformed(format!("not a flow snapshot file: `{head}`")));
    }
    let version = parts.next().unwrap_or("").to_string();
    if version != FILE_VERSION {
        return Err(FlowError::Version { found: version });
    }
    let dims = r.keyed("DIMS")?;
    if dims.len() != 3 {
        return Err(r.malformed("DIMS needs three values"));
    }
    let (nx, ny, nz): (usize, usize, usize) = (r.num(&dims[0])?, r.num(&dims[1])?, r.num(&dims[2])?);
    let spacing = r.keyed("SPACING")?;
    if spacing.len() != 2 {
        return Err(r.malformed("SPACING needs two values"));
    }
    let (dx, dy): (f64, f64) = (r.num(&spacing[0])?, r.num(&spacing[1])?);
    let dz = r
        .keyed("DZ")?
        .iter()
        .map(|s| r.num(s))
        .collect::<Result<Vec<f64>, _>>()?;
    let origin = r.keyed("ORIGIN")?;
    if origin.len() != 3 {
        return Err(r.malformed("ORIGIN needs three values"));
    }
    let origin = [r.num(&origin[0])?, r.num(&origin[1])?, r.num(&origin[2])?];
    let grid = Arc::new(Grid::build_structured(nx, ny, nz, dx, dy, &dz, origin)?);

    let por_line = r.next("POROSITY")?;
    let mut por_parts = por_line.split_whitespace();
    let porosity_const = match por_parts.next() {
        Some("POROSITY_CONST") => Some(r.num::<f64>(por_parts.next().unwrap_or(""))?),
        Some("POROSITY_ARRAY") => None,
        _ => return Err(r.malformed(format!("expected porosity line, found `{por_line}`"))),
    };
    let period = r.keyed("PERIOD")?;
    if period.len() != 2 {
        return Err(r.malformed("PERIOD needs start and duration"));
    }
    let duration: f64 = r.num(&period[1])?;
    let duration = duration.is_finite().then_some(duration);

    let n = grid.cell_count();
    let heads = r.array("HEADS", n)?;
    let flow_x = r.array("FACEFLOW_X", (nx + 1) * ny * nz)?;
    let flow_y = r.array("FACEFLOW_Y", nx * (ny + 1) * nz)?;
    let flow_z = r.array("FACEFLOW_Z", nx * ny * (nz + 1))?;
    let cell_source_sink = r.array("CELL_SRCSNK", n)?;
    let porosity = match porosity_const {
        Some(p) => Porosity::Uniform(p),
        None => Porosity::PerCell(r.array("POROSITY", n)?),
    };
    FlowSnapshot {
        grid,
        heads,
        flow_x,
        flow_y,
        flow_z,
        cell_source_sink,
        porosity: Porosity::Uniform(1.0),
        duration,
    }
    .with_porosity(porosity)
}
