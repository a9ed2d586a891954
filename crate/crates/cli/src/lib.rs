//! Command-line front end: single runs, benchmark matrices and reports.

// Guards such as `!(x >= 0.0)` are written that way to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod bench;
pub mod report;
pub mod run;

use std::path::Path;

use anyhow::{Context, Result};

use crate::args::{parse_args, Command};

/// Runs the command line `argv` (program name first) and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on failures.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let command = match parse_args(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            match e {
                args::CliError::Clap(e) => {
                    let _ = e.print();
                }
                args::CliError::Usage(msg) => eprintln!("error: {msg}"),
            }
            return code;
        }
    };
    match dispatch(command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(req) => {
            let summary = run::execute(&req)?;
            print!("{}", run::describe(&summary));
        }
        Command::Bench(req) => {
            let csv = req.out_dir.join("bench.csv");
            let rows = bench::run_bench(&req.matrix, &req.out_dir, &csv)?;
            println!("wrote {} rows to {}", rows.len(), csv.display());
            if let Some(path) = &req.report {
                write_report(&rows, path)?;
            }
        }
        Command::Report { csv, out } => {
            let rows = bench::read_csv(&csv)?;
            match out {
                Some(path) => write_report(&rows, &path)?,
                None => print!("{}", report::render_report(&rows)),
            }
        }
    }
    Ok(())
}

fn write_report(rows: &[bench::BenchRow], path: &Path) -> Result<()> {
    std::fs::write(path, report::render_report(rows)).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote report {}", path.display());
    Ok(())
}
