//! `rsdet`: convert detection annotations into instruction-tuning JSONL,
//! check and score model transcripts, and run the adapter numerics demo.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "rsdet", version, about = "Remote-sensing detection datasets for VLM instruction tuning")]
pub struct Cli {
    /// JSON file with default option values; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse source annotations into a dataset manifest.
    Convert(commands::ConvertArgs),
    /// Split, resize and render a manifest into train/test JSONL.
    Build(commands::BuildArgs),
    /// Score model transcripts against ground-truth JSONL.
    Evaluate(commands::EvaluateArgs),
    /// Report how each transcript parses.
    ParseCheck(commands::ParseCheckArgs),
    /// Check the adapter merge and embedding-noise numerics.
    LoraDemo(commands::LoraDemoArgs),
    /// Summarize a manifest.
    Stats(commands::StatsArgs),
}

/// Failure carrying the process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

pub fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

pub fn data(err: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(err.into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Convert(args) => commands::convert(args, &file),
        Command::Build(args) => commands::build(args, &file),
        Command::Evaluate(args) => commands::evaluate(args, &file),
        Command::ParseCheck(args) => commands::parse_check(args, &file),
        Command::LoraDemo(args) => commands::lora_demo(args, &file),
        Command::Stats(args) => commands::stats(args, &file),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Usage(err) | Failure::Data(err)) = &failure;
            eprintln!("error: {err:#}");
            ExitCode::from(failure.code())
        }
    }
}
