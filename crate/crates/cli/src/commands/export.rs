use std::path::{Path, PathBuf};

use clap::ValueEnum;
use preftree::pairs::{export_preference, export_sft, write_jsonl, SftMode};
use preftree::tree::load_trees;
use preftree::PreferenceTree;
use serde_json::json;

use super::summary;
use crate::config::PipelineConfig;
use crate::{io, Cli, CliError, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Multi-turn and augmented preference pairs.
    Preference,
    /// Correct leaves only.
    SftLeaf,
    /// Every correct action.
    SftAll,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Trees (JSONL).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Preference)]
    pub mode: Mode,
}

/// Reads and validates trees; any bad line is an input error.
pub fn read_trees(path: &Path) -> Result<Vec<PreferenceTree>, CliError> {
    load_trees(io::open_input(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn run(cli: &Cli, cfg: &PipelineConfig, args: &Args) -> Result<Status, CliError> {
    let input = io::require(&args.input, &cfg.paths.trees, "input")?;
    let output = io::require(&args.output, &cfg.paths.pairs, "output")?;
    let trees = read_trees(&input)?;
    let judged = trees.iter().filter(|t| t.instruction.requires_judge()).count();
    let written = match args.mode {
        Mode::Preference => {
            let pairs = export_preference(&trees, &cfg.augment());
            if !cli.dry_run {
                write_jsonl(&pairs, io::create_output(&output, false)?)
                    .map_err(|e| CliError::io(format!("writing {}", output.display()), e))?;
            }
            pairs.len()
        }
        Mode::SftLeaf | Mode::SftAll => {
            let mode = if args.mode == Mode::SftLeaf { SftMode::LeafOnly } else { SftMode::AllCorrect };
            let records = export_sft(&trees, mode);
            if !cli.dry_run {
                write_jsonl(&records, io::create_output(&output, false)?)
                    .map_err(|e| CliError::io(format!("writing {}", output.display()), e))?;
            }
            records.len()
        }
    };
    let mode = args.mode.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    summary(
        cli.format,
        &[
            ("trees", json!(trees.len())),
            ("mode", json!(mode)),
            ("records", json!(written)),
            ("judge_only_trees", json!(judged)),
            ("dry_run", json!(cli.dry_run)),
        ],
    );
    Ok(Status::Clean)
}
