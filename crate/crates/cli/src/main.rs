use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmd;
mod setup;

#[derive(Debug, Parser)]
#[command(name = "fedfdi", version, about = "Stealthy false-data injection simulation and federated detection on DC power grids")]
struct Cli {
    /// Worker threads for data generation and client training (0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a training corpus and validation subsets
    GenData(cmd::gen_data::Args),
    /// Train the detector with federated learning (or the single-shard baseline)
    Train(cmd::train::Args),
    /// Evaluate a checkpoint on validation subsets
    Eval(cmd::eval::Args),
    /// Show residual-test verdicts before and after attacks
    AttackDemo(cmd::attack_demo::Args),
    /// Summarize training runs
    Report(cmd::report::Args),
}

/// Output directory shared by every command; the environment variable wins
/// over the per-command default but not over an explicit flag.
pub const OUT_ENV: &str = "FEDFDI_OUT";

pub fn out_dir(flag: &Option<PathBuf>, default: &str) -> PathBuf {
    flag.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let divergence = err
        .chain()
        .filter_map(|e| e.downcast_ref::<fedfdi_core::Error>())
        .any(fedfdi_core::Error::is_divergence);
    if divergence {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => cmd::gen_data::run(a),
        Command::Train(a) => cmd::train::run(a),
        Command::Eval(a) => cmd::eval::run(a),
        Command::AttackDemo(a) => cmd::attack_demo::run(a),
        Command::Report(a) => cmd::report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
