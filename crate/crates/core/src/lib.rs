//! Steady-state groundwater flow, Gaussian conductivity fields and
//! semi-analytical particle tracking with a parallel particle loop.

// Guards such as `!(x >= 0.0)` are written that way to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod driver;
pub mod flow;
pub mod geostat;
pub mod grid;
pub mod output;
pub mod scenarios;
pub mod scheduler;
pub mod tracking;

pub use driver::{run_simulation, Mode, OutputTimes, SimulationConfig, SimulationSummary};
pub use flow::{FlowSnapshot, FlowStore, FlowView, SolverOptions};
pub use grid::{Axis, CellId, Face, Grid, Side};
pub use output::ProtocolKind;
pub use scenarios::{build_tc1, build_tc2, ScenarioKind, ScenarioSpec};
pub use scheduler::ScheduleSpec;
pub use tracking::{Particle, ParticleStatus, WeakSinkPolicy};
