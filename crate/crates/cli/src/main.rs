mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Regression-calibrated generalized propensity score analyses.
///
/// Each command reads one JSON config and writes its outputs into
/// `<output_dir>/run-<config hash>/`. Set RCGPS_THREADS to bound the
/// worker pool.
#[derive(Parser)]
#[command(name = "rcgps", version)]
struct Cli {
    /// Override the config's seed (scenario seed or bootstrap seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation study: oracle ATE plus replicate summaries.
    Simulate { config: PathBuf },
    /// Estimate ATEs on user data, with balance and overlap reports.
    Estimate { config: PathBuf },
    /// Balance and overlap reports only.
    Diagnose { config: PathBuf },
}

/// 3 for convergence failures, 2 for everything else the user can fix.
fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<rcgps_core::Error>())
        .map_or(2, |c| if c.is_convergence() { 3 } else { 2 })
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("RCGPS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("RCGPS_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Simulate { config } => commands::simulate(config, cli.seed),
        Command::Estimate { config } => commands::estimate(config, cli.seed, false),
        Command::Diagnose { config } => commands::estimate(config, cli.seed, true),
    });
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
