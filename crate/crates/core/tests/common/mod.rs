//! Shared test helpers: independent single-cell trajectory oracles (adaptive
//! Runge-Kutta positions, Gauss-Kronrod exit times) and record-set utilities.

#![allow(dead_code)]

use std::path::Path;

use ptrace_core::output::{decode_timeseries, read_endpoint_file, TimeseriesRecord};

/// Dormand-Prince 5(4) tableau. The field does not depend on time, so the
/// node offsets are not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Velocity linearly interpolated between the face values of one cell.
#[derive(Debug, Clone, Copy)]
pub struct LinearCell {
    pub v_low: [f64; 3],
    pub v_high: [f64; 3],
    pub size: [f64; 3],
}

impl LinearCell {
    fn velocity(&self, y: &[f64; 3]) -> [f64; 3] {
        let mut v = [0.0; 3];
        for a in 0..3 {
            let s = y[a] / self.size[a];
            v[a] = (1.0 - s) * self.v_low[a] + s * self.v_high[a];
        }
        v
    }

    /// One Dormand-Prince step; returns the 5th-order state and the error
    /// estimate.
    fn step(&self, y: &[f64; 3], h: f64) -> ([f64; 3], f64) {
        let mut k = [[0.0; 3]; 7];
        for s in 0..7 {
            let mut ys = *y;
            for (j, kj) in k.iter().enumerate().take(s) {
                for a in 0..3 {
                    ys[a] += h * A[s][j] * kj[a];
                }
            }
            k[s] = self.velocity(&ys);
        }
        let mut y5 = *y;
        let mut err: f64 = 0.0;
        for a in 0..3 {
            let mut d5 = 0.0;
            let mut d4 = 0.0;
            for s in 0..7 {
                d5 += B5[s] * k[s][a];
                d4 += B4[s] * k[s][a];
            }
            y5[a] += h * d5;
            let scale = 1e-15 * self.size[a] + 1e-13 * y5[a].abs().max(y[a].abs());
            err = err.max((h * (d5 - d4)).abs() / scale);
        }
        (y5, err)
    }
}

/// Exit of the oracle trajectory: time, axis and whether the high face
/// was hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleExit {
    pub time: f64,
    pub axis: usize,
    pub high: bool,
}

/// Position after `t` by adaptive Dormand-Prince integration, in cell
/// coordinates. The last step is shortened to land on `t`.
pub fn rk_position(cell: &LinearCell, local: [f64; 3], t_end: f64) -> [f64; 3] {
    let mut y = [0.0; 3];
    for a in 0..3 {
        y[a] = local[a] * cell.size[a];
    }
    let v0 = cell.velocity(&y);
    let speed = (0..3).map(|a| v0[a].abs() / cell.size[a]).fold(0.0, f64::max);
    let mut h = if speed > 0.0 { (1e-3 / speed).min(t_end) } else { t_end };
    let mut t = 0.0;
    while t < t_end {
        let step = h.min(t_end - t);
        let (y_new, err) = cell.step(&y, step);
        if err > 1.0 || !err.is_finite() {
            h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 0.5);
            continue;
        }
        y = y_new;
        t = if step == t_end - t { t_end } else { t + step };
        let grow = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = step * grow;
    }
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = y[a] / cell.size[a];
    }
    out
}

/// 7-point Gauss nodes and weights embedded in the 15-point Kronrod rule,
/// at their published precision.
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// Gauss-Kronrod 7-15 on `[a, b]`: integral and error estimate.
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let pair = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod quadrature to relative accuracy `rtol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rtol: f64) -> f64 {
    let (total, err) = gk15(f, a, b);
    let mut pieces = vec![(a, b, total, err)];
    loop {
        let sum: f64 = pieces.iter().map(|p| p.2).sum();
        let err: f64 = pieces.iter().map(|p| p.3).sum();
        if err <= rtol * sum.abs() || pieces.len() > 20_000 {
            return sum;
        }
        // Split the interval with the largest error.
        let (k, _) = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .unwrap();
        let (a, b, _, _) = pieces.swap_remove(k);
        let m = 0.5 * (a + b);
        let (i1, e1) = gk15(f, a, m);
        let (i2, e2) = gk15(f, m, b);
        pieces.push((a, m, i1, e1));
        pieces.push((m, b, i2, e2));
    }
}

/// Time for one axis to reach a face, from `t = \int dx / v(x)` evaluated
/// by quadrature. `None` when the velocity vanishes or reverses on the way.
pub fn quadrature_axis_exit(v_low: f64, v_high: f64, size: f64, local: f64) -> Option<(f64, bool)> {
    let v = |s: f64| (1.0 - s) * v_low + s * v_high;
    let v0 = v(local);
    if v0 == 0.0 {
        return None;
    }
    let high = v0 > 0.0;
    let target = if high { 1.0 } else { 0.0 };
    let vf = v(target);
    if vf == 0.0 || (vf > 0.0) != high {
        return None;
    }
    if local == target {
        return Some((0.0, high));
    }
    let (a, b) = if high { (local, target) } else { (target, local) };
    let t = size * integrate(&|s| 1.0 / v(s).abs(), a, b, 1e-14);
    Some((t, high))
}

/// Earliest face reached by the linearly interpolated field, by quadrature.
pub fn oracle_exit(cell: &LinearCell, local: [f64; 3]) -> Option<OracleExit> {
    let mut best: Option<OracleExit> = None;
    for (a, &x) in local.iter().enumerate() {
        if let Some((time, high)) = quadrature_axis_exit(cell.v_low[a], cell.v_high[a], cell.size[a], x) {
            if best.is_none_or(|b| time < b.time) {
                best = Some(OracleExit { time, axis: a, high });
            }
        }
    }
    best
}

/// Timeseries records from a set of files, sorted by (particle, index) and
/// rendered as text lines.
pub fn sorted_timeseries<P: AsRef<Path>>(files: &[P]) -> Vec<String> {
    let mut recs: Vec<TimeseriesRecord> = decode_timeseries(files).expect("decode timeseries");
    recs.sort_by_key(|r| (r.particle_id, r.time_index));
    recs.iter().map(|r| r.to_text()).collect()
}

/// Endpoint lines sorted by particle id.
pub fn sorted_endpoints(path: &Path) -> Vec<String> {
    let mut recs = read_endpoint_file(path).expect("read endpoints");
    recs.sort_by_key(|r| r.particle_id);
    recs.iter().map(|r| r.to_text()).collect()
}

/// Median of a non-empty sample.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
