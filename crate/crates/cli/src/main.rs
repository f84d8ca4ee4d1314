//! `evalflow`: run evaluations, rescore stored responses, validate datasets
//! and render reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 dataset error,
//! 3 the run finished but some items errored (reports are still written).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evalflow_core::EvalMode;
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "evalflow", version, about = "Evaluate language models against benchmark datasets")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a dataset through a backend and write records and reports.
    Eval(EvalArgs),
    /// Re-extract and rescore stored records without calling any backend.
    Score(ScoreArgs),
    /// Check a dataset file against the schema.
    Validate(ValidateArgs),
    /// Aggregate every run under a directory into one report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible server; replaces the configured backend.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<EvalMode>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub cot: bool,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Config supplying extraction rules and dataset defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model name for the report; defaults to the one in run_meta.json.
    #[arg(long)]
    pub model: Option<String>,
    /// Where to write the rescored records.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "md")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Config supplying dataset defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long, default_value = "md")]
    pub format: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    match s {
        "generate" => Ok(EvalMode::Generate),
        "ppl" => Ok(EvalMode::Ppl),
        other => Err(format!("unknown mode `{other}` (expected generate or ppl)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();

    let outcome = match cli.command {
        Command::Eval(args) => commands::eval(args),
        Command::Score(args) => commands::score(args),
        Command::Validate(args) => commands::validate(args),
        Command::Report(args) => commands::report(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
