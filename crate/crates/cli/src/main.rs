//! `cvopt`: statistics, allocation, sampling and evaluation from the command line.
//!
//! Exit codes: 0 on success, 1 for bad input (config, files, data), 2 for
//! internal failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "cvopt",
    version,
    about = "CV-optimal stratified sampling for group-by queries"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-stratum statistics of the aggregation columns.
    Stats(Common),
    /// Per-stratum sample sizes for the configured method.
    Plan(Common),
    /// Draw a sample according to a plan.
    Sample(Common),
    /// Answer the configured queries from a sample.
    Query(Common),
    /// Compare sample answers against exact answers.
    Evaluate(Common),
    /// Run several methods over several seeds and tabulate their errors.
    Compare(Common),
    /// Replay the data as a stream and maintain a bounded sample.
    StreamSim(Common),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (common, f): (&Common, fn(&RunConfig) -> anyhow::Result<()>) = match &cli.command {
        Command::Stats(c) => (c, commands::cmd_stats),
        Command::Plan(c) => (c, commands::cmd_plan),
        Command::Sample(c) => (c, commands::cmd_sample),
        Command::Query(c) => (c, commands::cmd_query),
        Command::Evaluate(c) => (c, commands::cmd_evaluate),
        Command::Compare(c) => (c, commands::cmd_compare),
        Command::StreamSim(c) => (c, commands::cmd_stream),
    };
    let cfg = RunConfig::load(&common.config, &common.overrides)?;
    f(&cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(_) => ExitCode::from(2),
    }
}
