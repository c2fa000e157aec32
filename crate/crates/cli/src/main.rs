//! `cuelens`: offline replay, training, metrics, the review API and the
//! device-link demo behind one binary.
//!
//! Exit codes: 0 success, 1 unreadable or invalid input, 2 configuration or
//! usage error, 3 runtime failure (bind, I/O on outputs, link failure).
//! Results are canonical JSON on stdout; logs go to stderr.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cuelens",
    version,
    about = "Expression cue pipeline, session journals and review API"
)]
struct Cli {
    /// JSON config file; flags override it, it overrides built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replay a journal or scenario through the pipeline.
    Run(RunArgs),
    /// Train a classifier on a dataset (default: the synthetic set).
    Train(TrainArgs),
    /// Evaluate a classifier on a dataset.
    Eval(EvalArgs),
    /// Serve the review API over a data directory until interrupted.
    Serve(ServeArgs),
    /// Generate a raw session journal from a scenario, or a training dataset.
    Synth(SynthArgs),
    /// Stream a scenario through a live device-link session.
    LinkDemo(LinkDemoArgs),
    /// Session metrics for a journal, or a subject's progress series.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Session journal or scenario JSON.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output journal.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Seed for synthetic generation (scenario noise, built-in training set).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Labeled dataset JSON; omitted means the synthetic set.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Output model JSON.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Model JSON; overrides `affect.model`.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, value_name = "PATH")]
    data_dir: Option<PathBuf>,
    #[arg(long, value_name = "ADDR")]
    bind: Option<String>,
    #[arg(long, value_name = "N")]
    port: Option<u16>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scenario JSON; omitted means a labeled training dataset.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Dataset examples per class.
    #[arg(long, value_name = "N", conflicts_with = "scenario")]
    per_class: Option<usize>,
    /// Dataset landmark noise.
    #[arg(long, value_name = "SIGMA", conflicts_with = "scenario")]
    sigma: Option<f64>,
}

#[derive(Debug, Args)]
struct LinkDemoArgs {
    /// Scenario JSON; omitted means a built-in 20 s demo.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Journal written by the receiving side.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Stop sending (no SESSION_END, no heartbeats) after this much session time.
    #[arg(long, value_name = "SECONDS")]
    drop_after: Option<f64>,
    /// Use TCP on this address instead of the in-process transport.
    #[arg(long, value_name = "ADDR")]
    bind: Option<String>,
    #[arg(long, value_name = "N")]
    port: Option<u16>,
    /// Send frames as fast as possible instead of at the frame rate.
    #[arg(long)]
    no_pace: bool,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Session journal.
    #[arg(long, value_name = "PATH", conflicts_with = "subject")]
    input: Option<PathBuf>,
    /// Subject whose progress series to compute from the data directory.
    #[arg(long, value_name = "ID")]
    subject: Option<String>,
    #[arg(long, value_name = "PATH")]
    data_dir: Option<PathBuf>,
}

/// Writes one canonical JSON line to stdout.
pub fn emit<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = cuelens_core::canonical::to_canonical_string(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}")
        .and_then(|_| out.flush())
        .map_err(|e| CliError::Runtime(format!("stdout: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config = Config::load(cli.config.as_deref())?;
    let value = match cli.command {
        Command::Run(a) => commands::run(&config, &a.input, a.out.as_deref(), a.seed)?,
        Command::Train(a) => commands::train(&config, a.input.as_deref(), a.out.as_deref(), a.seed)?,
        Command::Eval(a) => commands::eval(&config, &a.input, a.model.as_deref(), a.seed)?,
        Command::Serve(a) => return commands::serve(&config, a.data_dir, a.bind, a.port),
        Command::Synth(a) => commands::synth(&config, a.scenario.as_deref(), &a.out, a.seed, a.per_class, a.sigma)?,
        Command::LinkDemo(a) => commands::link_demo(
            &config,
            commands::LinkDemoArgs {
                scenario: a.scenario.as_deref(),
                out: a.out.as_deref(),
                seed: a.seed,
                drop_after_secs: a.drop_after,
                bind: a.bind,
                port: a.port,
                no_pace: a.no_pace,
            },
        )?,
        Command::Metrics(a) => {
            commands::metrics(&config, a.input.as_deref(), a.data_dir.as_deref(), a.subject.as_deref())?
        }
    };
    emit(&value)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cuelens: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
