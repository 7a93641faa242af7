//! `persona`: data synthesis, pipeline runs, training, evaluation, sweeps
//! and exports from one binary.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 on bad usage.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

/// A problem with how the command was invoked rather than with the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "persona", version, about = "Trait-routed LoRA experts on a toy language model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file (a run manifest also works); flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for every output [default: runs/<subcommand>].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic dialogue corpus.
    SynthData(commands::data::SynthArgs),
    /// Per-trait dialogue counts, turns and words per turn.
    Stats(commands::data::StatsArgs),
    /// Dialogue construction against a chat endpoint.
    #[command(subcommand)]
    Pipeline(commands::pipeline::PipelineCommand),
    /// Train adapters on a corpus and save a checkpoint.
    Train(commands::train::TrainArgs),
    /// Held-out cross-entropy of every trait's text under every condition.
    EvalLm(commands::assess::EvalArgs),
    /// Administer, score and aggregate a personality inventory.
    Inventory(commands::assess::InventoryArgs),
    /// Per-trait expert weights of a trained router.
    RouterExport(commands::assess::ExportArgs),
    /// Train and assess a grid of expert counts, ranks and regularizer weights.
    Sweep(commands::sweep::SweepArgs),
    #[command(hide = true)]
    SweepCell(commands::sweep::CellArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Stats(_) => "stats",
            Command::Pipeline(_) => "pipeline",
            Command::Train(_) => "train",
            Command::EvalLm(_) => "eval-lm",
            Command::Inventory(_) => "inventory",
            Command::RouterExport(_) => "router-export",
            Command::Sweep(_) => "sweep",
            Command::SweepCell(_) => "sweep-cell",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::resolve(cli.common.config.as_deref())?;
    config::set(&mut cfg.seed, cli.common.seed);
    let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    match &cli.command {
        Command::SynthData(a) => commands::data::synth_data(&mut cfg, a, &out),
        Command::Stats(a) => commands::data::stats(&cfg, a, cli.common.out.as_deref()),
        Command::Pipeline(c) => commands::pipeline::run(&mut cfg, c, &out),
        Command::Train(a) => commands::train::train(&mut cfg, a, &out),
        Command::EvalLm(a) => commands::assess::eval_lm(&mut cfg, a, &out),
        Command::Inventory(a) => commands::assess::inventory(&mut cfg, a, &out),
        Command::RouterExport(a) => commands::assess::router_export(&mut cfg, a, &out),
        Command::Sweep(a) => commands::sweep::sweep(&mut cfg, a, &out),
        Command::SweepCell(a) => commands::sweep::sweep_cell(a, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
