use std::path::PathBuf;

use preftree::corpus::stats;
use preftree::decontam::tokenize;
use preftree::pairs::{export_preference, PairRecord};

use super::export::read_trees;
use crate::config::PipelineConfig;
use crate::{io, Cli, CliError, Format, Status};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Trees (JSONL).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Exported pairs; derived from the trees when omitted.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value = "-")]
    pub output: PathBuf,
}

pub fn run(cli: &Cli, cfg: &PipelineConfig, args: &Args) -> Result<Status, CliError> {
    let input = io::require(&args.input, &cfg.paths.trees, "input")?;
    let trees = read_trees(&input)?;
    let pairs: Vec<PairRecord> = match &args.pairs {
        Some(p) => io::read_jsonl(p)?,
        None => export_preference(&trees, &cfg.augment()),
    };
    let table = stats(&trees, &pairs, tokenize);
    if cli.dry_run {
        log::info!("{} trees and {} pairs readable", trees.len(), pairs.len());
        return Ok(Status::Clean);
    }
    let text = match cli.format {
        Format::Table => table.to_table(),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&table).expect("stats serialize");
            s.push('\n');
            s
        }
    };
    io::write_text(&args.output, &text)?;
    Ok(Status::Clean)
}
