//! Semi-analytical particle advection through structured cells.
//!
//! Inside a cell each velocity component varies linearly along its own axis
//! between the two face values, so every axis integrates in closed form:
//! `v(x) = v_low + A x` gives `x(t) = x0 + v0 (e^{A t} - 1) / A` and the time
//! to reach a face at velocity `v_e` is `ln(v_e / v0) / A`. A particle crosses
//! one face per displacement step and is then handed to the neighbour cell.

use std::fmt;
use std::io;
use std::str::FromStr;

use thiserror::Error;

use crate::flow::{FlowView, SinkClass};
use crate::grid::{Axis, CellId, Face, Grid, Side};

/// Tolerated overshoot of a local coordinate before it is an error.
pub const EPS_CLAMP: f64 = 1e-9;
/// Relative gradient below which an axis is treated as uniform.
pub const EPS_GRADIENT: f64 = 1e-12;
/// Consecutive zero-length steps after which a particle is declared stagnant.
pub const MAX_ZERO_STEPS: u32 = 8;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("particle {id}: local coordinate {value} on axis {axis:?} left the cell by more than {EPS_CLAMP}")]
    Consistency { id: u64, axis: Axis, value: f64 },
    #[error("particle {id} is in cell {particle_cell} but the velocity state is for cell {state_cell}")]
    CellMismatch {
        id: u64,
        particle_cell: CellId,
        state_cell: CellId,
    },
    #[error("particle {id}: observer failed: {source}")]
    Observer {
        id: u64,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParticleStatus {
    Pending,
    Active,
    ReachedBoundary,
    ReachedStopTime,
    StrongSinkStop,
    WeakSinkStop,
    Stagnant,
}

impl ParticleStatus {
    pub const ALL: [ParticleStatus; 7] = [
        ParticleStatus::Pending,
        ParticleStatus::Active,
        ParticleStatus::ReachedBoundary,
        ParticleStatus::ReachedStopTime,
        ParticleStatus::StrongSinkStop,
        ParticleStatus::WeakSinkStop,
        ParticleStatus::Stagnant,
    ];

    /// Whether tracking has ended for good. `ReachedStopTime` is not
    /// terminal: the particle resumes at the next tracking step.
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ParticleStatus::ReachedBoundary
                | ParticleStatus::StrongSinkStop
                | ParticleStatus::WeakSinkStop
                | ParticleStatus::Stagnant
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParticleStatus::Pending => "pending",
            ParticleStatus::Active => "active",
            ParticleStatus::ReachedBoundary => "reached_boundary",
            ParticleStatus::ReachedStopTime => "reached_stop_time",
            ParticleStatus::StrongSinkStop => "strong_sink_stop",
            ParticleStatus::WeakSinkStop => "weak_sink_stop",
            ParticleStatus::Stagnant => "stagnant",
        }
    }
}

impl fmt::Display for ParticleStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParticleStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParticleStatus::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown particle status `{s}`"))
    }
}

/// What happens when a particle enters a weak-sink cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeakSinkPolicy {
    PassThrough,
    Stop,
}

impl FromStr for WeakSinkPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pass_through" | "pass-through" | "pass" => Ok(WeakSinkPolicy::PassThrough),
            "stop" => Ok(WeakSinkPolicy::Stop),
            _ => Err(format!("unknown weak-sink policy `{s}`")),
        }
    }
}

impl fmt::Display for WeakSinkPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeakSinkPolicy::PassThrough => "pass_through",
            WeakSinkPolicy::Stop => "stop",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub id: u64,
    pub group: u32,
    pub position: [f64; 3],
    pub local: [f64; 3],
    pub cell: CellId,
    pub time: f64,
    pub release_time: f64,
    pub status: ParticleStatus,
    pub initial_cell: CellId,
    pub initial_position: [f64; 3],
    /// Number of cell-to-cell transfers so far.
    pub segments: u32,
    /// Local coordinates and time at which the current in-cell trajectory
    /// started. Positions inside a cell are always evaluated from this
    /// anchor, so pausing at intermediate times does not perturb the path.
    pub anchor_local: [f64; 3],
    pub anchor_time: f64,
}

impl Particle {
    pub fn new(id: u64, group: u32, grid: &Grid, cell: CellId, local: [f64; 3], release_time: f64) -> Particle {
        let position = grid.global_position(cell, local);
        Particle {
            id,
            group,
            position,
            local,
            cell,
            time: release_time,
            release_time,
            status: ParticleStatus::Pending,
            initial_cell: cell,
            initial_position: position,
            segments: 0,
            anchor_local: local,
            anchor_time: release_time,
        }
    }

    /// Restarts the in-cell trajectory from the current state. Needed when
    /// the flow field changes under a particle.
    pub fn reanchor(&mut self) {
        self.anchor_local = self.local;
        self.anchor_time = self.time;
    }
}

/// Working set of one cell: face velocities and their linear gradients.
#[derive(Debug, Clone, Copy)]
pub struct CellVelocityState {
    pub cell: CellId,
    pub v_low: [f64; 3],
    pub v_high: [f64; 3],
    pub gradient: [f64; 3],
    pub size: [f64; 3],
    pub sink: SinkClass,
}

impl CellVelocityState {
    #[inline]
    pub fn new(view: &FlowView, cell: CellId) -> CellVelocityState {
        let v = view.velocities(cell);
        let size = view.grid().cell_size(cell);
        Self::from_faces(cell, *v, size, view.sink(cell))
    }

    #[inline]
    pub fn from_faces(cell: CellId, v: [f64; 6], size: [f64; 3], sink: SinkClass) -> Self {
        let v_low = [v[0], v[2], v[4]];
        let v_high = [v[1], v[3], v[5]];
        let gradient = [
            (v_high[0] - v_low[0]) / size[0],
            (v_high[1] - v_low[1]) / size[1],
            (v_high[2] - v_low[2]) / size[2],
        ];
        CellVelocityState {
            cell,
            v_low,
            v_high,
            gradient,
            size,
            sink,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Stagnant,
    StrongSink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    ExitedFace(Face),
    HitTimeLimit,
    Stopped(StopReason),
}

/// `dt` is measured from the particle's anchor time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOutcome {
    pub kind: OutcomeKind,
    pub dt: f64,
    pub exit_local: [f64; 3],
}

#[inline]
fn is_uniform(v_low: f64, v_high: f64, gradient: f64, delta: f64) -> bool {
    let eps = EPS_GRADIENT * v_low.abs().max(v_high.abs()) / delta;
    gradient == 0.0 || gradient.abs() < eps
}

/// Velocity at local coordinate `s`; exact on both faces.
#[inline]
fn interpolate(v_low: f64, v_high: f64, s: f64) -> f64 {
    (1.0 - s) * v_low + s * v_high
}

/// Time for one axis to reach a face, and which face. `None` when the
/// particle cannot leave along this axis.
#[inline]
pub fn axis_exit_candidate(v_low: f64, v_high: f64, x_local: f64, delta: f64) -> Option<(f64, Side)> {
    let gradient = (v_high - v_low) / delta;
    exit_candidate(v_low, v_high, gradient, x_local, delta)
}

#[inline]
fn exit_candidate(v_low: f64, v_high: f64, gradient: f64, x_local: f64, delta: f64) -> Option<(f64, Side)> {
    let x = x_local * delta;
    let vp = interpolate(v_low, v_high, x_local);
    if vp == 0.0 {
        return None;
    }
    let (side, dist) = if vp > 0.0 {
        (Side::High, delta - x)
    } else {
        (Side::Low, -x)
    };
    if is_uniform(v_low, v_high, gradient, delta) {
        return Some(((dist / vp).max(0.0), side));
    }
    let v_exit = match side {
        Side::High => v_high,
        Side::Low => v_low,
    };
    // The velocity changes sign before the face: stagnation point ahead.
    if v_exit == 0.0 || (v_exit > 0.0) != (vp > 0.0) {
        return None;
    }
    let dt = (gradient * dist / vp).ln_1p() / gradient;
    if dt.is_finite() {
        Some((dt.max(0.0), side))
    } else {
        None
    }
}

/// Local coordinate after `dt` along one axis, clamped into `[0, 1]`.
///
/// Overshoots up to [`EPS_CLAMP`] are clamped silently; larger ones are
/// reported as `Err(value)`.
#[inline]
pub fn analytic_position(v_low: f64, v_high: f64, x_local: f64, dt: f64, delta: f64) -> Result<f64, f64> {
    let gradient = (v_high - v_low) / delta;
    let x = x_local * delta;
    let vp = interpolate(v_low, v_high, x_local);
    let moved = if vp == 0.0 {
        // Resting on a stagnation point of this axis.
        0.0
    } else if is_uniform(v_low, v_high, gradient, delta) {
        vp * dt
    } else {
        let u = gradient * dt;
        // (e^u - 1) / u, well conditioned for small u.
        let phi = if u == 0.0 { 1.0 } else { u.exp_m1() / u };
        vp * dt * phi
    };
    let local = (x + moved) / delta;
    if (-EPS_CLAMP..=1.0 + EPS_CLAMP).contains(&local) {
        Ok(local.clamp(0.0, 1.0))
    } else {
        Err(local)
    }
}

/// One displacement step of `particle` inside the cell described by `state`,
/// bounded by the absolute time `t_limit`.
pub fn advance_in_cell(
    state: &CellVelocityState,
    particle: &Particle,
    t_limit: f64,
) -> Result<TrackOutcome, TrackError> {
    if particle.cell != state.cell {
        return Err(TrackError::CellMismatch {
            id: particle.id,
            particle_cell: particle.cell,
            state_cell: state.cell,
        });
    }
    if state.sink == SinkClass::StrongSink {
        return Ok(TrackOutcome {
            kind: OutcomeKind::Stopped(StopReason::StrongSink),
            dt: 0.0,
            exit_local: particle.local,
        });
    }
    let mut best: Option<(f64, Face)> = None;
    for a in 0..3 {
        if let Some((dt, side)) = exit_candidate(
            state.v_low[a],
            state.v_high[a],
            state.gradient[a],
            particle.anchor_local[a],
            state.size[a],
        ) {
            if best.is_none_or(|(b, _)| dt < b) {
                best = Some((dt, Face::new(Axis::ALL[a], side)));
            }
        }
    }
    let remaining = t_limit - particle.anchor_time;
    let (dt, exit) = match best {
        Some((dt, face)) if dt <= remaining => (dt, Some(face)),
        Some(_) => (remaining, None),
        None if remaining.is_finite() => (remaining, None),
        None => {
            return Ok(TrackOutcome {
                kind: OutcomeKind::Stopped(StopReason::Stagnant),
                dt: 0.0,
                exit_local: particle.local,
            })
        }
    };
    let mut local = [0.0; 3];
    for (a, slot) in local.iter_mut().enumerate() {
        *slot = analytic_position(
            state.v_low[a],
            state.v_high[a],
            particle.anchor_local[a],
            dt,
            state.size[a],
        )
        .map_err(|value| TrackError::Consistency {
            id: particle.id,
            axis: Axis::ALL[a],
            value,
        })?;
    }
    let kind = match exit {
        Some(face) => {
            local[face.axis.index()] = match face.side {
                Side::Low => 0.0,
                Side::High => 1.0,
            };
            OutcomeKind::ExitedFace(face)
        }
        None => OutcomeKind::HitTimeLimit,
    };
    Ok(TrackOutcome {
        kind,
        dt,
        exit_local: local,
    })
}

/// Receives tracking events; each method returns the number of records it
/// wrote.
pub trait TrackObserver {
    fn released(&mut self, _particle: &Particle) -> io::Result<u64> {
        Ok(0)
    }
    /// The particle is alive at the tracking limit of the current step.
    fn time_limit(&mut self, _particle: &Particle) -> io::Result<u64> {
        Ok(0)
    }
    fn cell_transfer(&mut self, _particle: &Particle) -> io::Result<u64> {
        Ok(0)
    }
    fn terminal(&mut self, _particle: &Particle) -> io::Result<u64> {
        Ok(0)
    }
}

/// Observer that records nothing (endpoint runs).
#[derive(Debug, Default, Clone, Copy)]
pub struct NullObserver;

impl TrackObserver for NullObserver {}

/// Summation-reduced loop counters.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Counters {
    pub particles_completed: u64,
    pub records_written: u64,
    pub weak_sink_passes: u64,
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, rhs: Counters) {
        self.particles_completed += rhs.particles_completed;
        self.records_written += rhs.records_written;
        self.weak_sink_passes += rhs.weak_sink_passes;
    }
}

fn observe(id: u64, r: io::Result<u64>, counters: &mut Counters) -> Result<(), TrackError> {
    counters.records_written += r.map_err(|source| TrackError::Observer { id, source })?;
    Ok(())
}

fn finish<O: TrackObserver + ?Sized>(
    particle: &mut Particle,
    status: ParticleStatus,
    observer: &mut O,
    counters: &mut Counters,
) -> Result<Counters, TrackError> {
    particle.status = status;
    counters.particles_completed += 1;
    observe(particle.id, observer.terminal(particle), counters)?;
    Ok(*counters)
}

/// Checks the cell a particle has just entered (or been released into).
/// Returns the stop status if the particle ends there.
fn entry_check(
    view: &FlowView,
    cell: CellId,
    policy: WeakSinkPolicy,
    counters: &mut Counters,
) -> Option<ParticleStatus> {
    match view.sink(cell) {
        SinkClass::StrongSink => Some(ParticleStatus::StrongSinkStop),
        SinkClass::WeakSink => match policy {
            WeakSinkPolicy::Stop => Some(ParticleStatus::WeakSinkStop),
            WeakSinkPolicy::PassThrough => {
                counters.weak_sink_passes += 1;
                None
            }
        },
        SinkClass::NoSink => None,
    }
}

/// Moves one particle until it stops or reaches `t_max`.
///
/// Pending particles released after `t_max` are left untouched. A particle
/// alive at `t_max` ends with `ReachedStopTime` and its time set exactly to
/// `t_max`, and the observer's `time_limit` hook fires.
pub fn track_particle<O: TrackObserver + ?Sized>(
    view: &FlowView,
    particle: &mut Particle,
    t_max: f64,
    policy: WeakSinkPolicy,
    observer: &mut O,
) -> Result<Counters, TrackError> {
    let mut counters = Counters::default();
    match particle.status {
        ParticleStatus::Pending => {
            if particle.release_time > t_max {
                return Ok(counters);
            }
            particle.status = ParticleStatus::Active;
            observe(particle.id, observer.released(particle), &mut counters)?;
            if let Some(stop) = entry_check(view, particle.cell, policy, &mut counters) {
                return finish(particle, stop, observer, &mut counters);
            }
        }
        ParticleStatus::Active | ParticleStatus::ReachedStopTime => {
            particle.status = ParticleStatus::Active;
        }
        _ => return Ok(counters),
    }

    let grid = view.grid();
    let mut zero_steps = 0u32;
    loop {
        if particle.time >= t_max {
            particle.status = ParticleStatus::ReachedStopTime;
            observe(particle.id, observer.time_limit(particle), &mut counters)?;
            return Ok(counters);
        }
        let state = CellVelocityState::new(view, particle.cell);
        let outcome = advance_in_cell(&state, particle, t_max)?;
        particle.local = outcome.exit_local;
        match outcome.kind {
            OutcomeKind::HitTimeLimit => {
                particle.time = t_max;
                particle.position = grid.global_position(particle.cell, particle.local);
            }
            OutcomeKind::Stopped(reason) => {
                let status = match reason {
                    StopReason::Stagnant => ParticleStatus::Stagnant,
                    StopReason::StrongSink => ParticleStatus::StrongSinkStop,
                };
                return finish(particle, status, observer, &mut counters);
            }
            OutcomeKind::ExitedFace(face) => {
                particle.time = particle.anchor_time + outcome.dt;
                particle.position = grid.global_position(particle.cell, particle.local);
                let Some(next) = grid.neighbor_unchecked(particle.cell, face) else {
                    return finish(particle, ParticleStatus::ReachedBoundary, observer, &mut counters);
                };
                let a = face.axis.index();
                particle.local[a] = 1.0 - particle.local[a];
                particle.cell = next;
                particle.segments += 1;
                particle.reanchor();
                if outcome.dt == 0.0 {
                    zero_steps += 1;
                    if zero_steps >= MAX_ZERO_STEPS {
                        return finish(particle, ParticleStatus::Stagnant, observer, &mut counters);
                    }
                } else {
                    zero_steps = 0;
                }
                observe(particle.id, observer.cell_transfer(particle), &mut counters)?;
                if let Some(stop) = entry_check(view, next, policy, &mut counters) {
                    return finish(particle, stop, observer, &mut counters);
                }
            }
        }
    }
}

/// Per-worker tracking engine: a shared read-only flow view plus the
/// weak-sink policy. Engines are cheap to create and never shared.
#[derive(Debug, Clone, Copy)]
pub struct TrackingEngine<'a> {
    pub view: &'a FlowView,
    pub policy: WeakSinkPolicy,
}

impl<'a> TrackingEngine<'a> {
    pub fn new(view: &'a FlowView, policy: WeakSinkPolicy) -> Self {
        TrackingEngine { view, policy }
    }
}
