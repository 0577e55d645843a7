use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use ofql_bench::commands;
use ofql_bench::{BenchError, Command, RunConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Train,
    Eval,
    BenchSpeed,
    ToyStudy,
    Ablate,
    Repro,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Command {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::BenchSpeed => Command::BenchSpeed,
            Cmd::ToyStudy => Command::ToyStudy,
            Cmd::Ablate => Command::Ablate,
            Cmd::Repro => Command::Repro,
        }
    }
}

/// Offline RL training, evaluation, sweeps and timing.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    command: Cmd,
    /// Config file, JSON (`.json`) or TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the config and exit.
    #[arg(long)]
    dry_run: bool,
    /// Checkpoint to score (eval only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), BenchError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.command = cli.command.into();
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    commands::run(&config, cli.checkpoint.as_deref(), cli.dry_run)?;
    if cli.dry_run {
        println!("config ok ({})", config.hash());
    } else {
        println!("wrote {}", config.out.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
