//! Single simulation runs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;

use ptrace_core::driver::{run_simulation, Mode, OutputTimes, SimulationConfig, SimulationSummary};
use ptrace_core::flow::{load_snapshot, save_snapshot, FlowSnapshot, Porosity, SolverOptions};
use ptrace_core::scenarios::{tc1_spec, tc2_spec, ScenarioKind, ScenarioSpec, Tc2Options, TC1_RELEASE_X};

use crate::args::{RunRequest, ScenarioParams};

/// Scenario definition for `params`, without solving the flow.
pub fn build_scenario(params: &ScenarioParams) -> Result<ScenarioSpec> {
    let spec = match params.kind {
        ScenarioKind::Tc1 => tc1_spec(params.sigma2, params.np, params.seed, params.scale)?,
        ScenarioKind::Tc2 => tc2_spec(
            params.np,
            params.ts_count,
            params.refine,
            params.scale,
            Tc2Options { wells: params.wells },
        )?,
    };
    Ok(spec)
}

/// Solves the flow for `spec`, or reads it from `flow_in` after checking
/// that the grids agree.
pub fn flow_for(spec: &ScenarioSpec, flow_in: Option<&Path>) -> Result<FlowSnapshot> {
    match flow_in {
        Some(path) => {
            let snap = load_snapshot(path).with_context(|| format!("reading flow file {}", path.display()))?;
            if *snap.grid != *spec.grid {
                bail!(
                    "flow file {} has a {}x{}x{} grid, the scenario needs {}x{}x{}",
                    path.display(),
                    snap.grid.nx(),
                    snap.grid.ny(),
                    snap.grid.nz(),
                    spec.grid.nx(),
                    spec.grid.ny(),
                    spec.grid.nz()
                );
            }
            Ok(snap.with_porosity(Porosity::Uniform(spec.porosity))?)
        }
        None => Ok(spec.solve(&SolverOptions::default())?),
    }
}

/// Output times for tc1 timeseries runs: equispaced over the mean travel
/// time to the outlet, which is `L_x - x_release` days under a unit
/// gradient with unit mean conductivity and porosity.
pub fn tc1_output_times(spec: &ScenarioSpec, count: usize) -> OutputTimes {
    OutputTimes::Equispaced {
        total: spec.grid.extent()[0] - TC1_RELEASE_X,
        count,
    }
}

/// Simulation configuration for a request on a built scenario.
pub fn config_for(req: &RunRequest, spec: &ScenarioSpec) -> SimulationConfig {
    let mut config = spec.config(&req.out_dir);
    config.mode = req.mode;
    config.workers = req.workers;
    config.schedule = req.schedule;
    config.protocol = req.protocol;
    config.stop_time = req.stop_time;
    if let Some(w) = req.weak_sink {
        config.weak_sink = w;
    }
    if let Some(t) = &req.output_times {
        config.output_times = t.clone();
    } else if req.mode == Mode::Timeseries && spec.kind == ScenarioKind::Tc1 {
        config.output_times = tc1_output_times(spec, req.params.ts_count);
    }
    config
}

pub fn execute(req: &RunRequest) -> Result<SimulationSummary> {
    let spec = build_scenario(&req.params)?;
    for w in &spec.warnings {
        eprintln!("warning: {w}");
    }
    let snap = flow_for(&spec, req.flow_in.as_deref())?;
    if let Some(path) = &req.emit_flow {
        save_snapshot(&snap, path).with_context(|| format!("writing flow file {}", path.display()))?;
        info!("flow snapshot written to {}", path.display());
    }
    let store = spec.store(&snap)?;
    std::fs::create_dir_all(&req.out_dir).with_context(|| format!("creating {}", req.out_dir.display()))?;
    let config = config_for(req, &spec);
    let summary = run_simulation(&config, &store)?;
    Ok(summary)
}

/// Human-readable run summary.
pub fn describe(summary: &SimulationSummary) -> String {
    let mut s = format!(
        "elapsed {:.3} s (loops {:.3} s, flow updates {:.3} s, consolidation {:.3} s)\n",
        summary.elapsed.as_secs_f64(),
        summary.timings.particle_loops.as_secs_f64(),
        summary.timings.flow_update.as_secs_f64(),
        summary.timings.consolidation.as_secs_f64()
    );
    s.push_str(&format!("particles {}\n", summary.particles.len()));
    for (status, count) in &summary.status_histogram {
        s.push_str(&format!("  {status}: {count}\n"));
    }
    s.push_str(&format!(
        "records {}, weak-sink passes {}\n",
        summary.loops.counters.records_written, summary.loops.counters.weak_sink_passes
    ));
    for f in summary.files.iter().chain(summary.endpoint_file.iter()) {
        s.push_str(&format!("wrote {}\n", f.display()));
    }
    s
}
