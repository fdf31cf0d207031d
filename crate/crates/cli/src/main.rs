use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mics_cli::config::OutputFormat;
use mics_cli::verify::VerifyOptions;
use mics_cli::{cmd_cost, cmd_simulate, cmd_verify, SimulateArgs, REPORT_DIR_ENV};

#[derive(Parser)]
#[command(name = "mics", version, about = "Simulate, verify and cost sharded data-parallel training schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Jsonl,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => OutputFormat::Table,
            Format::Csv => OutputFormat::Csv,
            Format::Jsonl => OutputFormat::Jsonl,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every strategy of a scenario file and report the comparison.
    Simulate {
        config: PathBuf,
        /// Validate and print the resolved configuration only.
        #[arg(long)]
        dry_run: bool,
        #[arg(long, value_enum)]
        format: Option<Format>,
        /// Report file (overrides the report directory and the config).
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Node counts to sweep, e.g. 2,4,8,16.
        #[arg(long, value_delimiter = ',')]
        nodes: Vec<usize>,
    },
    /// Check hierarchical gathers, batched collectives and gradient sync
    /// schedules against brute-force oracles.
    Verify {
        #[arg(long, default_value_t = 64)]
        max_p: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        k: Vec<usize>,
        /// Drop devices-per-node values above this bound.
        #[arg(long)]
        max_k: Option<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Payload chunk sizes in bytes (gradient lengths for the sync sweep).
        #[arg(long, value_delimiter = ',', default_value = "1,7,1024")]
        chunk_sizes: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Negative control: skip the stage-2 rearrangement.
        #[arg(long, hide = true)]
        corrupt_stage2: bool,
    },
    /// Evaluate a cost formula: `mics cost traffic_reduction p=64 k=8`.
    Cost {
        #[arg(required = true, num_args = 1..)]
        args: Vec<String>,
    },
}

fn main() -> ExitCode {
    // Usage errors share the config-error code; 2 is reserved for infeasible.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { mics_cli::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    let code = match cli.command {
        Command::Simulate {
            config,
            dry_run,
            format,
            output,
            threads,
            nodes,
        } => {
            let args = SimulateArgs {
                config,
                dry_run,
                format: format.map(Into::into),
                output,
                threads,
                nodes,
                report_dir: std::env::var_os(REPORT_DIR_ENV).map(PathBuf::from),
            };
            cmd_simulate(&args, &mut out, &mut err)
        }
        Command::Verify {
            max_p,
            k,
            max_k,
            seeds,
            chunk_sizes,
            threads,
            corrupt_stage2,
        } => {
            let opts = VerifyOptions {
                max_p,
                ks: k.into_iter().filter(|&k| max_k.map_or(true, |m| k <= m)).collect(),
                seeds,
                chunk_sizes,
                threads,
                corrupt_stage2,
                ..VerifyOptions::default()
            };
            cmd_verify(&opts, &mut out, &mut err)
        }
        Command::Cost { args } => cmd_cost(&args, &mut out, &mut err),
    };
    ExitCode::from(code as u8)
}
