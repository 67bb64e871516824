use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use eswm::harness::{exit_code, load_config, run, Command, RunOptions};

/// Train and analyse episodic spatial world models.
#[derive(Debug, Parser)]
#[command(name = "eswm", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,

    /// TOML experiment config; defaults apply to anything left out.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.iterations=500`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Checkpoint to load instead of the one in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Use ground-truth dynamics instead of a trained model.
    #[arg(long)]
    oracle: bool,

    /// Only report per-task accuracy in `eval`.
    #[arg(long)]
    accuracy_only: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref(), &cli.overrides).and_then(|mut cfg| {
        if let Some(path) = cli.checkpoint {
            cfg.checkpoint = Some(path);
        }
        run(cli.command, &cfg, RunOptions { oracle: cli.oracle, accuracy_only: cli.accuracy_only })
    });
    match result {
        Ok(summary) => {
            print!("{}", summary.report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
