use std::collections::HashSet;
use std::io::BufReader;
use std::path::PathBuf;

use preftree::corpus::SourceFormat;
use preftree::tree::{load_trees, save_trees};
use serde_json::json;

use super::{gold_answers, ingest, summary};
use crate::config::PipelineConfig;
use crate::{io, Cli, CliError, Status};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Selected instructions (JSONL).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Trees (JSONL). Appended to with --resume.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Per-turn sampling reports (JSONL).
    #[arg(long)]
    pub audit: Option<PathBuf>,
    /// Instructions whose build failed (JSONL).
    #[arg(long)]
    pub failures: Option<PathBuf>,
}

pub fn run(cli: &Cli, cfg: &PipelineConfig, args: &Args) -> Result<Status, CliError> {
    let input = io::require(&args.input, &cfg.paths.selected, "input")?;
    let output = io::require(&args.output, &cfg.paths.trees, "output")?;
    let audit = args.audit.clone().or_else(|| cfg.paths.audit.clone());
    let failures = args.failures.clone().or_else(|| cfg.paths.failures.clone());

    let ingested = ingest(&input, SourceFormat::Jsonl, &cfg.select.default_dataset)?;
    let mut status = if ingested.errors.is_empty() { Status::Clean } else { Status::Partial };

    let resuming = cli.resume && !io::is_stdio(&output) && output.exists();
    let done: HashSet<String> = if resuming {
        let f = std::fs::File::open(&output).map_err(|e| CliError::io(format!("cannot open {}", output.display()), e))?;
        let trees = load_trees(BufReader::new(f)).map_err(|e| CliError::Input(format!("{}: {e}", output.display())))?;
        trees.into_iter().map(|t| t.instruction.id).collect()
    } else {
        HashSet::new()
    };
    let mut seen = HashSet::new();
    let todo: Vec<_> = ingested
        .records
        .into_iter()
        .filter(|i| !done.contains(&i.id))
        .filter(|i| {
            let fresh = seen.insert(i.id.clone());
            if !fresh {
                log::warn!("{}: duplicate instruction id; keeping the first", i.id);
            }
            fresh
        })
        .collect();

    let gold = gold_answers(&todo);
    let critic_name =
        cfg.models.critic.as_ref().ok_or_else(|| CliError::Config("models.critic must be set".into()))?;
    let critic = cfg.client(critic_name, &gold)?;
    let judge = cfg.models.judge.as_ref().map(|n| cfg.client(n, &gold)).transpose()?;
    let engine = cfg.engine(critic, judge)?;
    let sampler = cfg.sampler(&gold)?;
    let jobs = cfg.jobs(cli.jobs);

    if cli.dry_run {
        summary(
            cli.format,
            &[
                ("to_build", json!(todo.len())),
                ("already_built", json!(done.len())),
                ("jobs", json!(jobs)),
                ("dry_run", json!(true)),
            ],
        );
        return Ok(status);
    }

    log::info!("building {} trees, jobs = {jobs}", todo.len());
    let results = engine.build_batch(&todo, &sampler, jobs);
    let mut trees = Vec::new();
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for (inst, result) in todo.iter().zip(results) {
        match result {
            Ok(outcome) => {
                trees.push(outcome.tree);
                reports.extend(outcome.reports);
            }
            Err(e) => {
                log::warn!("{}: {e}", inst.id);
                failed.push(json!({ "instruction_id": inst.id, "error": e.to_string() }));
            }
        }
    }

    let sink = io::create_output(&output, resuming)?;
    save_trees(&trees, sink).map_err(|e| CliError::Input(format!("{}: {e}", output.display())))?;
    if let Some(path) = &audit {
        let sink = io::create_output(path, resuming)?;
        preftree::pairs::write_jsonl(&reports, sink).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    }
    if let Some(path) = &failures {
        let sink = io::create_output(path, resuming)?;
        preftree::pairs::write_jsonl(&failed, sink).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    }
    if !failed.is_empty() {
        status = Status::Partial;
    }
    summary(
        cli.format,
        &[
            ("built", json!(trees.len())),
            ("skipped", json!(done.len())),
            ("failed", json!(failed.len())),
            ("turn_reports", json!(reports.len())),
            ("samples_used", json!(reports.iter().map(|r| u64::from(r.samples_used())).sum::<u64>())),
        ],
    );
    Ok(status)
}
