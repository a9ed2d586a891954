//! Shared fixtures for the criterion benches.

use ptrace_core::flow::SinkClass;
use ptrace_core::grid::{CellId, Grid};
use ptrace_core::tracking::{CellVelocityState, Particle};

/// A single cell with linearly varying velocity on every axis, and a
/// particle near its low corner.
pub fn linear_cell() -> (CellVelocityState, Particle) {
    let size = [10.0, 5.0, 2.0];
    let grid = Grid::build_structured(1, 1, 1, size[0], size[1], &[size[2]], [0.0; 3]).expect("grid");
    let faces = [1.0, 1.7, 0.2, 0.35, -0.01, 0.02];
    let state = CellVelocityState::from_faces(CellId(0), faces, grid.cell_size(CellId(0)), SinkClass::NoSink);
    let particle = Particle::new(0, 0, &grid, CellId(0), [0.1, 0.2, 0.5], 0.0);
    (state, particle)
}

/// Scratch directory for run outputs.
pub fn scratch_dir(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("ptrace-bench-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("scratch dir");
    dir
}
