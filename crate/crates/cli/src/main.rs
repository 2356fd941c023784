use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use cbin_core::baselines::BaselineKind;
use cbin_core::ModeChoice;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(name = "cbin", version, about = "Train and query bidirectional inference networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and per-epoch log.
    Train(Common),
    /// Predict target variables for every row of the configured split.
    Infer(InferArgs),
    /// Evaluate checkpoints and baselines on the configured task suite.
    Suite(SuiteArgs),
    /// Write the configured dataset as comma-separated text.
    GenData(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seed (the dataset seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Output location: a directory for train and suite, a file otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint path written by train.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated target variable names; defaults to every suite task.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Answer with a baseline instead of the checkpoint's inference.
    #[arg(long, value_parser = parse_baseline)]
    baseline: Option<BaselineKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SuiteArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint, optionally prefixed `bin=` or `cbin=`; repeatable.
    #[arg(long)]
    checkpoint: Vec<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Extra baseline rows; repeatable.
    #[arg(long, value_parser = parse_baseline)]
    baseline: Vec<BaselineKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    Forward,
    Hybrid,
    General,
}

impl From<ModeArg> for ModeChoice {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Auto => ModeChoice::Auto,
            ModeArg::Forward => ModeChoice::Forward,
            ModeArg::Hybrid => ModeChoice::Hybrid,
            ModeArg::General => ModeChoice::General,
        }
    }
}

fn parse_baseline(s: &str) -> Result<BaselineKind, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match cli.command {
        Command::Train(a) => ("train", commands::train(&a.config, a.seed, a.out, a.checkpoint)),
        Command::Infer(a) => (
            "infer",
            commands::infer(commands::InferRequest {
                config: a.config,
                checkpoint: a.checkpoint,
                targets: a.targets,
                mode: a.mode.map(Into::into),
                baseline: a.baseline,
                seed: a.seed,
                out: a.out,
            }),
        ),
        Command::Suite(a) => (
            "suite",
            commands::suite(commands::SuiteRequest {
                config: a.config,
                checkpoints: a.checkpoint,
                mode: a.mode.map(Into::into),
                baselines: a.baseline,
                seed: a.seed,
                out: a.out,
            }),
        ),
        Command::GenData(a) => ("gen-data", commands::gen_data(&a.config, a.seed, a.out)),
    };
    match result {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "command": name,
                "kind": commands::error_kind(&e),
                "message": format!("{e:#}"),
            });
            let _ = writeln!(std::io::stderr(), "{record}");
            ExitCode::FAILURE
        }
    }
}
