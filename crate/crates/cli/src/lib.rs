//! Scenario runner, oracle sweeps and cost calculator behind the `mics` binary.

pub mod config;
pub mod cost;
pub mod report;
pub mod units;
pub mod verify;

use std::io::Write;
use std::path::{Path, PathBuf};

use mics_core::collectives::Executor;
use mics_core::simulator::compare_strategies;
use mics_core::Error;

use crate::config::{OutputFormat, Scenario};

/// Environment variable naming a directory that receives simulation reports.
pub const REPORT_DIR_ENV: &str = "MICS_REPORT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Clone, Default)]
pub struct SimulateArgs {
    pub config: PathBuf,
    pub dry_run: bool,
    pub format: Option<OutputFormat>,
    pub output: Option<PathBuf>,
    pub threads: usize,
    /// Node counts to sweep; empty runs the file as written.
    pub nodes: Vec<usize>,
    /// Report directory (normally from [`REPORT_DIR_ENV`]).
    pub report_dir: Option<PathBuf>,
}

fn scenarios(base: &Scenario, nodes: &[usize]) -> Result<Vec<Scenario>, config::ConfigError> {
    if nodes.is_empty() {
        return Ok(vec![base.clone()]);
    }
    nodes
        .iter()
        .map(|&m| {
            let mut s = base.with_nodes(m)?;
            s.name = format!("{}-n{}", base.name, s.cluster.world_size());
            Ok(s)
        })
        .collect()
}

fn destination(args: &SimulateArgs, base: &Scenario, format: OutputFormat) -> Option<PathBuf> {
    if let Some(p) = &args.output {
        return Some(p.clone());
    }
    if let Some(dir) = &args.report_dir {
        return Some(dir.join(format!("{}.{}", base.name, format.extension())));
    }
    base.output_path.clone()
}

fn write_report(path: &Path, text: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)
}

/// Loads, validates and simulates a scenario file; writes the comparison
/// report to the chosen destination or `out`.
pub fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let base = match config::load(&args.config) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let runs = match scenarios(&base, &args.nodes) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "config error: {e}");
            return EXIT_CONFIG;
        }
    };
    if args.dry_run {
        for (i, s) in runs.iter().enumerate() {
            if runs.len() > 1 {
                let _ = writeln!(out, "{}# scenario {}", if i > 0 { "\n" } else { "" }, s.name);
            }
            let _ = write!(out, "{}", s.to_toml());
        }
        return EXIT_OK;
    }
    let executor = match Executor::with_threads(args.threads.max(1)) {
        Ok(e) => e,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let results = executor.map(&runs, |s| {
        compare_strategies(&s.cluster, &s.layers, &s.strategies, &s.options, &Executor::sequential())
            .map(|cmp| report::records(&s.name, s.cluster.num_nodes, s.cluster.devices_per_node, &cmp))
    });
    let mut records = Vec::new();
    for (s, r) in runs.iter().zip(results) {
        match r {
            Ok(recs) => records.extend(recs),
            Err(e @ Error::Infeasible { .. }) => {
                let _ = writeln!(err, "infeasible scenario {}: {e}", s.name);
                return EXIT_INFEASIBLE;
            }
            Err(e) => {
                let _ = writeln!(err, "config error: {}: {e}", s.source.display());
                return EXIT_CONFIG;
            }
        }
    }
    let format = args.format.unwrap_or(base.format);
    let text = report::render(&records, format);
    match destination(args, &base, format) {
        Some(path) => {
            if let Err(e) = write_report(&path, &text) {
                let _ = writeln!(err, "error: cannot write {}: {e}", path.display());
                return EXIT_CONFIG;
            }
            let _ = writeln!(err, "wrote {}", path.display());
        }
        None => {
            let _ = write!(out, "{text}");
        }
    }
    EXIT_OK
}

/// Runs the oracle sweeps and prints the pass/fail matrix.
pub fn cmd_verify(opts: &verify::VerifyOptions, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    if opts.seeds == 0 {
        let _ = writeln!(err, "warning: --seeds 0 runs no cases; the sweep passes vacuously");
    }
    match verify::run(opts) {
        Ok(report) => {
            let _ = write!(out, "{}", report.render());
            if report.passed() {
                EXIT_OK
            } else {
                EXIT_VERIFY
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_CONFIG
        }
    }
}

/// Evaluates one cost formula and prints the key/value report.
pub fn cmd_cost(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match cost::evaluate(args) {
        Ok(report) => {
            let _ = write!(out, "{}", report.to_kv_text());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_CONFIG
        }
    }
}
