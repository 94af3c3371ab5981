mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Grid abstraction, sound neural compression, reach-avoid synthesis, and
/// controller deployment for the built-in model catalog.
#[derive(Parser)]
#[command(name = "nabs", version, about)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, default_value = "nabs.toml")]
    config: PathBuf,

    /// Worker threads for the data-parallel stages (0 = all cores). Results
    /// are independent of this setting.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the forward transition table and the backward predecessor hulls.
    Abstract {
        /// Refuse to build tables whose records exceed this budget.
        #[arg(long)]
        disk_budget_mb: Option<u64>,
    },
    /// Train corrected neural representations of the tables.
    Compress,
    /// Synthesize reach-avoid controllers from the representations.
    Synthesize {
        /// Expand the candidate pool from the whole winning set instead of
        /// the frontier and cross-check that the results agree.
        #[arg(long)]
        full_pool: bool,
    },
    /// Compress the synthesized controller into a deployable bundle.
    Deploy,
    /// Run seeded closed-loop simulations of the deployed controller.
    Simulate,
    /// Recompute and print all metrics from the artifacts on disk.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .expect("thread pool is configured once");
    }

    let run = || -> anyhow::Result<()> {
        let ctx = commands::Context::load(&cli.config)?;
        match cli.command {
            Command::Abstract { disk_budget_mb } => commands::cmd_abstract(&ctx, disk_budget_mb),
            Command::Compress => commands::cmd_compress(&ctx),
            Command::Synthesize { full_pool } => commands::cmd_synthesize(&ctx, full_pool),
            Command::Deploy => commands::cmd_deploy(&ctx),
            Command::Simulate => commands::cmd_simulate(&ctx),
            Command::Report => commands::cmd_report(&ctx),
        }
    };

    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            match err.downcast_ref::<nabs::Error>() {
                Some(nabs::Error::Soundness(_)) => ExitCode::from(2),
                Some(nabs::Error::BudgetExceeded { .. }) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
