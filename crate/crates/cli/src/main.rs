use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quase_cli::config;
use quase_cli::pipeline::{self, EditOptions};
use quase_cli::{CliError, CliResult};
use quase_core::editing::Target;

#[derive(Parser)]
#[command(name = "quase", version, about = "Outcome-targeted sentence editing pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; relative paths inside it start at its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a rated synthetic corpus, its lexicon and mined pairs.
    Synth,
    /// Rate the raw corpus and split it into train/valid/test.
    Prepare,
    /// Mine pseudo-parallel pairs from the training split.
    Mine,
    /// Train a model and keep the best checkpoint.
    Train,
    /// Edit sentences read from stdin toward an outcome target.
    Edit(EditArgs),
    /// Evaluate the trained model on the test split.
    Eval,
    /// Train and evaluate every pair-loss subset.
    Ablate,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Target outcome in [1, 5].
    #[arg(long, conflicts_with_all = ["max", "min"], required_unless_present_any = ["max", "min"])]
    target: Option<f64>,
    /// Push the outcome as high as the feasible range allows.
    #[arg(long, conflicts_with = "min")]
    max: bool,
    /// Push the outcome as low as the feasible range allows.
    #[arg(long)]
    min: bool,
    /// Natural log of the density threshold bounding the search.
    #[arg(long, allow_negative_numbers = true)]
    log_tau: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
}

fn needs_config(cmd: &Command, given: bool) -> CliResult<()> {
    if !given && !matches!(cmd, Command::Edit(_)) {
        return Err(CliError::config("--config is required for this subcommand"));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let loaded = config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    needs_config(&cli.command, cli.config.is_some())?;
    let summary = match &cli.command {
        Command::Synth => pipeline::cmd_synth(&loaded)?,
        Command::Prepare => pipeline::cmd_prepare(&loaded)?,
        Command::Mine => pipeline::cmd_mine(&loaded)?,
        Command::Train => pipeline::cmd_train(&loaded)?,
        Command::Eval => pipeline::cmd_eval(&loaded)?,
        Command::Ablate => pipeline::cmd_ablate(&loaded)?,
        Command::Edit(a) => {
            let target = match (a.target, a.max, a.min) {
                (Some(t), _, _) => Target::Value(t),
                (None, true, _) => Target::Max,
                _ => Target::Min,
            };
            let opts = EditOptions {
                checkpoint: a.checkpoint.clone(),
                target,
                log_tau: a.log_tau,
                beam: a.beam,
            };
            pipeline::cmd_edit(&loaded, &opts, io::stdin().lock(), io::stdout().lock())?;
            return Ok(());
        }
    };
    let mut out = io::stdout().lock();
    match writeln!(out, "{summary}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(CliError::new("io", format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
