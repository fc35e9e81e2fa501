use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unimlip_cli::{dispatch, Command, Invocation};

#[derive(Parser)]
#[command(name = "unimlip", version, about = "Desk-scale vision-language pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// TOML configuration; defaults to the run directory's echoed config.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.base_lr=3e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true, value_name = "PATH", default_value = "run")]
    run_dir: PathBuf,

    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the synthetic corpus and its split.
    GenData,
    /// Run both pre-training phases.
    Pretrain,
    /// Recall@K on the held-out split.
    EvalRetrieval,
    /// Linear probe on frozen image features.
    Probe,
    /// Fine-tune and score visual question answering.
    Vqa,
    /// Train and compare every ablation variant.
    Ablate,
    /// Summarize the run directory.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::GenData => Command::GenData,
        Cmd::Pretrain => Command::Pretrain,
        Cmd::EvalRetrieval => Command::EvalRetrieval,
        Cmd::Probe => Command::Probe,
        Cmd::Vqa => Command::Vqa,
        Cmd::Ablate => Command::Ablate,
        Cmd::Report => Command::Report,
    };
    let inv = Invocation {
        command,
        config: cli.config,
        overrides: cli.overrides,
        run_dir: cli.run_dir,
        seed: cli.seed,
    };
    match dispatch(&inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("unimlip: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
