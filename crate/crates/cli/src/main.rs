//! `advlab` — config-driven runs over the laboratory's training, attack,
//! benchmarking, and reporting pipelines. One JSON config plus one seed
//! determines every artifact byte (single-threaded schedule).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use advlab_cli::commands;
use advlab_cli::config::{self, RunConfig};

#[derive(Parser)]
#[command(name = "advlab", version, about = "Adversarial-robustness laboratory runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model: standard, or Free AT when the train block has free_at.
    Train(RunArgs),
    /// Robustness sweep over an epsilon grid (clean, PGD per ε, clipped MIG).
    Eval(RunArgs),
    /// Generate and persist one adversarial set.
    Attack(RunArgs),
    /// Transferability benchmark stages.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Render CSV/SVG/PGM reports from saved evaluations.
    Report(RunArgs),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Generate the adversarial benchmark from surrogate checkpoints.
    Build(RunArgs),
    /// Evaluate target checkpoints against a saved benchmark.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker-thread count for per-image attack work
    /// (1 = bit-exact reference schedule).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let (args, command): (&RunArgs, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Train(a) => (a, commands::run_train),
        Command::Eval(a) => (a, commands::run_eval),
        Command::Attack(a) => (a, commands::run_attack),
        Command::Bench(BenchCommand::Build(a)) => (a, commands::run_bench_build),
        Command::Bench(BenchCommand::Run(a)) => (a, commands::run_bench_run),
        Command::Report(a) => (a, commands::run_report),
    };

    let mut config = config::parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = threads;
    }
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    if config.threads == 0 {
        bail!("threads must be at least 1");
    }
    command(&config)
}
