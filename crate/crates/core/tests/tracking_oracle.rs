//! In-cell kernel against numerical oracles, plus kernel invariants.

mod common;

use proptest::prelude::*;

use common::{oracle_exit, rk_position, LinearCell};
use ptrace_core::flow::SinkClass;
use ptrace_core::grid::{CellId, Grid, Side};
use ptrace_core::tracking::{advance_in_cell, CellVelocityState, OutcomeKind, Particle, TrackOutcome};

fn axis_velocity() -> impl Strategy<Value = (f64, f64)> {
    let v = prop_oneof![
        (-3.0f64..3.0).prop_map(|e| 10f64.powf(e)),
        (-3.0f64..3.0).prop_map(|e| -10f64.powf(e))
    ];
    prop_oneof![
        1 => Just((0.0, 0.0)),
        1 => v.clone().prop_map(|a| (a, a)),
        1 => v.clone().prop_map(|a| (0.0, a)),
        1 => v.clone().prop_map(|a| (a, 0.0)),
        6 => (v.clone(), v),
    ]
}

fn local_coord() -> impl Strategy<Value = f64> {
    prop_oneof![1 => Just(0.0), 1 => Just(1.0), 8 => 0.0f64..1.0]
}

#[derive(Debug, Clone)]
struct Case {
    v_low: [f64; 3],
    v_high: [f64; 3],
    size: [f64; 3],
    local: [f64; 3],
}

fn case() -> impl Strategy<Value = Case> {
    (
        [axis_velocity(), axis_velocity(), axis_velocity()],
        [0.3f64..300.0, 0.3f64..300.0, 0.1f64..50.0],
        [local_coord(), local_coord(), local_coord()],
    )
        .prop_map(|(v, size, local)| Case {
            v_low: [v[0].0, v[1].0, v[2].0],
            v_high: [v[0].1, v[1].1, v[2].1],
            size,
            local,
        })
}

fn setup(c: &Case) -> (CellVelocityState, Particle, LinearCell) {
    let grid = Grid::build_structured(1, 1, 1, c.size[0], c.size[1], &[c.size[2]], [0.0; 3]).unwrap();
    let faces = [
        c.v_low[0],
        c.v_high[0],
        c.v_low[1],
        c.v_high[1],
        c.v_low[2],
        c.v_high[2],
    ];
    let state = CellVelocityState::from_faces(CellId(0), faces, grid.cell_size(CellId(0)), SinkClass::NoSink);
    let particle = Particle::new(0, 0, &grid, CellId(0), c.local, 0.0);
    let cell = LinearCell {
        v_low: c.v_low,
        v_high: c.v_high,
        size: c.size,
    };
    (state, particle, cell)
}

/// Moves the particle to the end of a time-limited step, keeping its anchor.
fn pause(particle: &mut Particle, outcome: &TrackOutcome) {
    particle.local = outcome.exit_local;
    particle.time = particle.anchor_time + outcome.dt;
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn interior_positions_match_runge_kutta(c in case(), frac in 0.05f64..0.95) {
        let (state, particle, cell) = setup(&c);
        let horizon = match oracle_exit(&cell, c.local) {
            Some(o) => o.time.min(1e3),
            None => 1e3,
        };
        let t = frac * horizon;
        if t == 0.0 {
            // Already on an outflow face; covered by the exit properties.
            return Ok(());
        }
        let out = advance_in_cell(&state, &particle, t).unwrap();
        prop_assert_eq!(out.kind, OutcomeKind::HitTimeLimit);
        prop_assert!((out.dt - t).abs() <= 1e-12 * t);
        let reference = rk_position(&cell, c.local, t);
        for (a, &want) in reference.iter().enumerate() {
            let err = (out.exit_local[a] - want).abs();
            prop_assert!(err <= 1e-8, "axis {} kernel {} rk {} err {:e}", a, out.exit_local[a], want, err);
        }
    }

    #[test]
    fn exits_land_on_the_face_and_stay_in_the_cell(c in case()) {
        let (state, particle, _) = setup(&c);
        let out = advance_in_cell(&state, &particle, f64::INFINITY).unwrap();
        for a in 0..3 {
            prop_assert!((0.0..=1.0).contains(&out.exit_local[a]));
        }
        prop_assert!(out.dt >= 0.0);
        if let OutcomeKind::ExitedFace(face) = out.kind {
            let want = if face.side == Side::High { 1.0 } else { 0.0 };
            prop_assert_eq!(out.exit_local[face.axis.index()], want);
            // The velocity on the exit face points out of the cell.
            let a = face.axis.index();
            let v = if face.side == Side::High { c.v_high[a] } else { -c.v_low[a] };
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn paused_steps_reproduce_a_single_step(c in case(), cuts in prop::collection::vec(0.0f64..1.0, 1..5)) {
        let (state, particle, _) = setup(&c);
        let single = advance_in_cell(&state, &particle, f64::INFINITY).unwrap();
        prop_assume!(matches!(single.kind, OutcomeKind::ExitedFace(_)));
        let mut cuts: Vec<f64> = cuts.iter().map(|f| f * single.dt).collect();
        cuts.sort_by(f64::total_cmp);
        let mut p = particle.clone();
        for &t in &cuts {
            let step = advance_in_cell(&state, &p, t).unwrap();
            if step.kind != OutcomeKind::HitTimeLimit {
                break;
            }
            pause(&mut p, &step);
        }
        let resumed = advance_in_cell(&state, &p, f64::INFINITY).unwrap();
        prop_assert_eq!(resumed.kind, single.kind);
        prop_assert_eq!(resumed.dt.to_bits(), single.dt.to_bits());
        for a in 0..3 {
            prop_assert_eq!(resumed.exit_local[a].to_bits(), single.exit_local[a].to_bits());
        }
    }
}

#[test]
fn uniform_flow_crossing_time() {
    let c = Case {
        v_low: [2.0, 0.0, 0.0],
        v_high: [2.0, 0.0, 0.0],
        size: [10.0, 1.0, 1.0],
        local: [0.25, 0.5, 0.5],
    };
    let (state, particle, _) = setup(&c);
    let out = advance_in_cell(&state, &particle, f64::INFINITY).unwrap();
    assert!(matches!(out.kind, OutcomeKind::ExitedFace(f) if f.side == Side::High && f.axis.index() == 0));
    assert!((out.dt - 3.75).abs() < 1e-12);
    assert_eq!(out.exit_local, [1.0, 0.5, 0.5]);
}

#[test]
fn linear_flow_crossing_time_is_logarithmic() {
    // v(x) = 1 + x on [0, 1]: t = ln(2) from the low face.
    let c = Case {
        v_low: [1.0, 0.0, 0.0],
        v_high: [2.0, 0.0, 0.0],
        size: [1.0, 1.0, 1.0],
        local: [0.0, 0.5, 0.5],
    };
    let (state, particle, _) = setup(&c);
    let out = advance_in_cell(&state, &particle, f64::INFINITY).unwrap();
    assert!((out.dt - std::f64::consts::LN_2).abs() < 1e-14);
}

#[test]
fn converging_flow_without_exit_is_stagnant() {
    let c = Case {
        v_low: [1.0, 0.0, 0.0],
        v_high: [-1.0, 0.0, 0.0],
        size: [1.0, 1.0, 1.0],
        local: [0.3, 0.5, 0.5],
    };
    let (state, particle, _) = setup(&c);
    let out = advance_in_cell(&state, &particle, f64::INFINITY).unwrap();
    assert!(matches!(out.kind, OutcomeKind::Stopped(_)));
    let later = advance_in_cell(&state, &particle, 50.0).unwrap();
    assert_eq!(later.kind, OutcomeKind::HitTimeLimit);
    assert!((later.exit_local[0] - 0.5).abs() < 1e-12);
}
