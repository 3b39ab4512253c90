//! `deformer` command-line driver.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{Config, Profile};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "deformer", version, about = "Train and evaluate order-agnostic DEformer density models")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Default profile: desk, paper-images or paper-tabular.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train a model; writes checkpoints and train_log.csv to run.output_dir.
    Train,
    /// Order-averaged test NLL per sample, written to eval.csv.
    Eval,
    /// Ancestral samples as PGM images (or CSV rows) plus NLLs sorted ascending.
    Generate,
    /// Fill in removed pixels of test images.
    Impute,
    /// Compare NLL distributions of test images and out-of-distribution images.
    Ood,
    /// Gradient, mask-rule, normalisation and causality checks.
    Selftest,
}

fn resolve(cli: &Cli) -> Result<Config, CliError> {
    let mut entries = Vec::new();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        entries.extend(config::parse_text(&text)?);
    }
    for s in &cli.set {
        entries.push(config::parse_override(s)?);
    }
    let profile = cli.profile.as_deref().map(str::parse::<Profile>).transpose().map_err(|e| CliError::config("run.profile", e))?;
    Config::resolve(profile, &entries)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    commands::validate(&cfg)?;
    commands::write_resolved(&cfg, &cfg.output_dir())?;
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Generate => commands::generate_cmd(&cfg),
        Command::Impute => commands::impute_cmd(&cfg),
        Command::Ood => commands::ood(&cfg),
        Command::Selftest => commands::selftest_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    let command = Cli::command().after_long_help(config::help_table()).after_help("Run with --help to list every configuration key and its defaults.");
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
