//! `preftree` command line: corpus selection, tree building, export,
//! decontamination, loss diagnostics, reranking and statistics.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::PipelineConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}

/// Whether anything was recorded as failed along the way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Clean,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "preftree", version, about = "Build and use tree-structured preference data")]
pub struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the core count, capped by the sandbox pool.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Skip instructions already present in the output.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Validate inputs and configuration without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest instructions and apply the selection filters.
    Select(commands::select::Args),
    /// Build preference trees.
    Build(commands::build::Args),
    /// Turn trees into preference pairs or SFT records.
    Export(commands::export::Args),
    /// Drop instructions that overlap evaluation sets.
    Decontam(commands::decontam::Args),
    /// Train the toy reward model and check the loss kernels.
    Losslab(commands::losslab::Args),
    /// Best-of-N selection by reward, against pass@N and majority vote.
    Rerank(commands::rerank::Args),
    /// Corpus statistics.
    Stats(commands::stats::Args),
}

fn run(cli: &Cli) -> Result<Status, CliError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        if seed != cfg.seed {
            log::info!("seed = {seed} from command line");
        }
        cfg.seed = seed;
    }
    if cli.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    if cli.resume && !matches!(cli.command, Command::Build(_)) {
        log::warn!("--resume only affects build; ignored");
    }
    match &cli.command {
        Command::Select(a) => commands::select::run(cli, &cfg, a),
        Command::Build(a) => commands::build::run(cli, &cfg, a),
        Command::Export(a) => commands::export::run(cli, &cfg, a),
        Command::Decontam(a) => commands::decontam::run(cli, &cfg, a),
        Command::Losslab(a) => commands::losslab::run(cli, &cfg, a),
        Command::Rerank(a) => commands::rerank::run(cli, &cfg, a),
        Command::Stats(a) => commands::stats::run(cli, &cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(Status::Clean) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
