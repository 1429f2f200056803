//! `bnngp` command-line entry point.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
//! `BNNGP_THREADS` caps internal parallelism (all pipelines currently run
//! single-threaded, so any positive cap is honored as-is).

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use bnngp::{Error, Result};
use commands::CommandContext;
use config::Config;

#[derive(Parser)]
#[command(
    name = "bnngp",
    version,
    about = "Mixed-kernel GP experiments: simulation, MAP fitting, evaluation, and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark scenario dataset (CSV + provenance JSON).
    Simulate(CommonArgs),
    /// MAP-fit the mixed-kernel GP on a dataset and evaluate the held-out split.
    Fit(CommonArgs),
    /// Compute metrics (both scales) from a predictions CSV.
    Eval(CommonArgs),
    /// Reproduce the kernel shape-correlation table.
    KernelProbe(CommonArgs),
    /// Finite-width Monte-Carlo check of the infinite-width limit.
    OracleCheck(CommonArgs),
    /// Fit/evaluate across a grid of Nystrom ranks and emit budget tables.
    RankSweep(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Path to a key=value config file (or a previous run manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn effective_threads() -> Result<usize> {
    match std::env::var("BNNGP_THREADS") {
        Ok(raw) => {
            let cap: usize = raw.parse().map_err(|_| {
                Error::Input(format!("BNNGP_THREADS must be a positive integer, got '{raw}'"))
            })?;
            if cap == 0 {
                return Err(Error::Input("BNNGP_THREADS must be >= 1".into()));
            }
            Ok(cap.min(1))
        }
        Err(_) => Ok(1),
    }
}

fn build_context(args: &CommonArgs) -> Result<CommandContext> {
    let threads = effective_threads()?;
    let mut config = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::empty(),
    };
    if let Some(seed) = args.seed {
        config.set("seed", seed.to_string());
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::Data(format!("cannot create output dir {}: {e}", args.out.display())))?;
    Ok(CommandContext { config, out_dir: args.out.clone(), threads })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => commands::cmd_simulate(&build_context(&args)?),
        Command::Fit(args) => commands::cmd_fit(&build_context(&args)?),
        Command::Eval(args) => commands::cmd_eval(&build_context(&args)?),
        Command::KernelProbe(args) => commands::cmd_kernel_probe(&build_context(&args)?),
        Command::OracleCheck(args) => commands::cmd_oracle_check(&build_context(&args)?),
        Command::RankSweep(args) => commands::cmd_rank_sweep(&build_context(&args)?),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let message = err.to_string().replace('\n', " ");
        eprintln!("error[{}]: {message}", commands::error_class(&err));
        std::process::exit(commands::exit_code(&err));
    }
}
