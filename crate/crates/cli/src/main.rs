//! `rankopt` command-line experiment runner.
//!
//! Three subcommands, each driven by a JSON config file:
//! - `gen-synth`: write a deterministic synthetic LETOR dataset.
//! - `run`: execute one offline-simulation experiment.
//! - `compare`: replay several configs (confound-guarded) and join their
//!   learning curves by oracle budget used.
//!
//! Exit codes: 0 success, 2 config validation failure, 1 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rankopt::experiment::{
    compare, gen_synthetic, run, CompareConfig, ExperimentConfig, ExperimentError, GenSynthConfig,
};

#[derive(Parser)]
#[command(name = "rankopt", about = "Offline ranking-optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic LETOR dataset.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment and write its report artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several experiments and emit a budget-aligned comparison.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &PathBuf) -> Result<String, ExperimentError> {
    std::fs::read_to_string(path).map_err(ExperimentError::Io)
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::GenSynth { config, out } => {
            let cfg = GenSynthConfig::from_json(&read_config(&config)?)?;
            let path = gen_synthetic(&cfg, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::from_json(&read_config(&config)?)?;
            let report = run(&cfg, &out)?;
            println!(
                "run {} finished: {} queries, final true metric {:.6}; artifacts in {}",
                report.summary.name,
                report.summary.total_queries,
                report.summary.final_true_metric,
                out.display()
            );
        }
        Command::Compare { config, out } => {
            let cfg = CompareConfig::from_json(&read_config(&config)?)?;
            let table = compare(&cfg, &out)?;
            for fm in &table.final_medians {
                println!(
                    "{}: median final true metric {:.6}",
                    fm.name, fm.median_final_true_metric
                );
            }
            println!("wrote {}", out.join("comparison.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ ExperimentError::Config(_)) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
