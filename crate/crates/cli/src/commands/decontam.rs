use std::collections::BTreeMap;
use std::path::PathBuf;

use preftree::corpus::{self, SourceFormat};
use preftree::decontam::{filter_corpus, tokenize};
use preftree::pairs::write_jsonl;
use preftree::Task;
use serde::Deserialize;
use serde_json::json;

use super::{ingest, summary};
use crate::config::PipelineConfig;
use crate::{io, Cli, CliError, Status};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Instructions to screen (JSONL).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Evaluation documents, one `{"id", "task", "text"}` per line.
    #[arg(long)]
    pub test_sets: Option<PathBuf>,
    /// Held-out solutions, one `{"id", "text"}` per line; matched against coding prompts.
    #[arg(long)]
    pub held_out_code: Option<PathBuf>,
    /// Instructions that passed.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// One match report per instruction.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TestDoc {
    id: String,
    task: String,
    text: String,
}

fn parse_task(s: &str) -> Option<Task> {
    match s.to_ascii_lowercase().as_str() {
        "math" => Some(Task::Math),
        "coding" | "code" => Some(Task::Coding),
        "logic" => Some(Task::Logic),
        _ => None,
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeDoc {
    id: String,
    text: String,
}

pub fn run(cli: &Cli, cfg: &PipelineConfig, args: &Args) -> Result<Status, CliError> {
    let input = io::require(&args.input, &cfg.paths.selected, "input")?;
    let test_path = io::require(&args.test_sets, &cfg.paths.test_sets, "test sets")?;
    let output = io::require(&args.output, &None, "output")?;
    let report = args.report.clone().or_else(|| cfg.paths.report.clone());
    let code_path = args.held_out_code.clone().or_else(|| cfg.paths.held_out_code.clone());

    let ingested = ingest(&input, SourceFormat::Jsonl, &cfg.select.default_dataset)?;
    let docs: Vec<TestDoc> = io::read_jsonl(&test_path)?;
    let code: Vec<(String, String)> = match &code_path {
        Some(p) => io::read_jsonl::<CodeDoc>(p)?.into_iter().map(|d| (d.id, d.text)).collect(),
        None => Vec::new(),
    };
    let mut test_sets: BTreeMap<Task, Vec<(String, String)>> =
        [Task::Math, Task::Coding, Task::Logic].into_iter().map(|t| (t, Vec::new())).collect();
    for d in docs {
        let task = parse_task(&d.task)
            .ok_or_else(|| CliError::Input(format!("{}: test document {}: unknown task {:?}", test_path.display(), d.id, d.task)))?;
        test_sets.entry(task).or_default().push((d.id, d.text));
    }
    let n_docs: usize = test_sets.values().map(Vec::len).sum();
    if cli.dry_run {
        summary(
            cli.format,
            &[
                ("instructions", json!(ingested.records.len())),
                ("test_documents", json!(n_docs)),
                ("held_out_code", json!(code.len())),
                ("dry_run", json!(true)),
            ],
        );
        return Ok(Status::Clean);
    }

    let read = ingested.records.len();
    let outcome = filter_corpus(ingested.records, &test_sets, &code, &cfg.decontam(), tokenize);
    corpus::save(&outcome.kept, io::create_output(&output, false)?)
        .map_err(|e| CliError::io(format!("writing {}", output.display()), e))?;
    if let Some(path) = &report {
        write_jsonl(&outcome.reports, io::create_output(path, false)?)
            .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    }
    for inst in &outcome.removed {
        log::warn!("{}: contaminated, removed", inst.id);
    }
    summary(
        cli.format,
        &[
            ("instructions", json!(read)),
            ("test_documents", json!(n_docs)),
            ("kept", json!(outcome.kept.len())),
            ("removed", json!(outcome.removed.len())),
        ],
    );
    let clean = outcome.removed.is_empty() && ingested.errors.is_empty();
    Ok(if clean { Status::Clean } else { Status::Partial })
}
