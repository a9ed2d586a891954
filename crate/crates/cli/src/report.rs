//! Markdown summary tables from a bench CSV.

use std::collections::BTreeMap;

use crate::bench::{BenchRow, NO_PROTOCOL};

/// Absent cell marker.
const ABSENT: &str = "-";

/// A pivot table; rows and columns keep first-seen order.
struct Pivot {
    corner: String,
    columns: Vec<String>,
    rows: Vec<(String, BTreeMap<usize, String>)>,
}

impl Pivot {
    fn new(corner: &str) -> Self {
        Pivot {
            corner: corner.to_string(),
            columns: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Sets a cell; the first value for a cell wins.
    fn put(&mut self, row: String, column: String, value: String) {
        let c = match self.columns.iter().position(|x| *x == column) {
            Some(c) => c,
            None => {
                self.columns.push(column);
                self.columns.len() - 1
            }
        };
        let r = match self.rows.iter().position(|(x, _)| *x == row) {
            Some(r) => r,
            None => {
                self.rows.push((row, BTreeMap::new()));
                self.rows.len() - 1
            }
        };
        self.rows[r].1.entry(c).or_insert(value);
    }

    fn render(&self, out: &mut String) {
        if self.rows.is_empty() {
            out.push_str("(no matching rows)\n");
            return;
        }
        out.push_str(&format!("| {} |", self.corner));
        for c in &self.columns {
            out.push_str(&format!(" {c} |"));
        }
        out.push('\n');
        out.push('|');
        for _ in 0..=self.columns.len() {
            out.push_str("---|");
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(&format!("| {label} |"));
            for c in 0..self.columns.len() {
                let v = cells.get(&c).map_or(ABSENT, String::as_str);
                out.push_str(&format!(" {v} |"));
            }
            out.push('\n');
        }
    }
}

fn value(v: Option<f64>) -> String {
    v.map_or(ABSENT.to_string(), |x| format!("{x:.3}"))
}

fn schedule_label(r: &BenchRow) -> String {
    if r.schedule == "dynamic" {
        format!("dynamic,{}", r.chunk)
    } else {
        r.schedule.clone()
    }
}

fn problem_label(r: &BenchRow) -> String {
    match r.scenario.as_str() {
        "tc1" => format!("tc1 s2={} {}", r.sigma2, r.mode),
        _ => format!("{} refine={} {}", r.scenario, r.refine, r.mode),
    }
}

/// Renders the four summary tables:
/// speedup against N_p per schedule, dynamic/static time ratio against
/// sigma2, protocol comparison, and refined/base time ratio against N_p.
pub fn render_report(rows: &[BenchRow]) -> String {
    let mut out = String::from("# ptrace benchmark report\n\n");

    out.push_str("## Speedup T1/Tn by particle count\n\n");
    let mut t = Pivot::new("problem | np");
    for r in rows {
        t.put(
            format!("{} | {}", problem_label(r), r.np),
            format!("{} n={}", schedule_label(r), r.threads),
            value(r.speedup),
        );
    }
    t.render(&mut out);

    out.push_str("\n## Dynamic/static time ratio by sigma2\n\n");
    let mut t = Pivot::new("scenario | sigma2 | np");
    for r in rows.iter().filter(|r| r.schedule == "dynamic") {
        t.put(
            format!("{} | {} | {}", r.scenario, r.sigma2, r.np),
            format!("chunk {} n={}", r.chunk, r.threads),
            value(r.ratio_dyn_sta),
        );
    }
    t.render(&mut out);

    out.push_str("\n## Output protocol median time (s)\n\n");
    let mut t = Pivot::new("problem | np | threads | schedule");
    for r in rows.iter().filter(|r| r.protocol != NO_PROTOCOL) {
        t.put(
            format!(
                "{} | {} | {} | {}",
                problem_label(r),
                r.np,
                r.threads,
                schedule_label(r)
            ),
            r.protocol.clone(),
            value(r.median_s),
        );
    }
    t.render(&mut out);

    out.push_str("\n## Refined/base time ratio by particle count\n\n");
    let mut t = Pivot::new("scenario | np");
    for r in rows.iter().filter(|r| r.refine > 1) {
        t.put(
            format!("{} | {}", r.scenario, r.np),
            format!("refine {} n={} {}", r.refine, r.threads, schedule_label(r)),
            value(r.ratio_refined_base),
        );
    }
    t.render(&mut out);
    out
}
