use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lcnmf::pipeline::{self, Outcome, RunConfig};
use lcnmf::{Error, ErrorKind};

/// Disaggregate aggregate load curves into sector contributions.
#[derive(Debug, Parser)]
#[command(name = "lcnmf", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Read inputs, build curves and constraint matrices.
    Prepare,
    /// Scree analysis of the prepared curves.
    Rank,
    /// Fit the ensemble and keep the low-loss cluster.
    Fit,
    /// Sector series with uncertainty bands and typical-day profiles.
    Disaggregate,
    /// Monthly sector consumption for new load curves.
    Nowcast,
    /// Write a synthetic dataset with known ground truth.
    Synth,
    /// SVG plots and a text summary.
    Report,
}

fn config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = Some(threads);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Outcome, Error> {
    let cfg = config(cli)?;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Prepare => pipeline::cmd_prepare(&cfg),
        Command::Rank => pipeline::cmd_rank(&cfg),
        Command::Fit => pipeline::cmd_fit(&cfg),
        Command::Disaggregate => pipeline::cmd_disaggregate(&cfg),
        Command::Nowcast => pipeline::cmd_nowcast(&cfg),
        Command::Synth => pipeline::cmd_synth(&cfg),
        Command::Report => pipeline::cmd_report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            for notice in outcome.notices {
                println!("{notice}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
