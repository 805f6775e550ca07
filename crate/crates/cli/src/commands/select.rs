use std::path::PathBuf;
use std::sync::Arc;

use preftree::client::{ClientError, ModelClient};
use preftree::corpus::{self, SourceFormat};
use serde_json::json;

use super::{gold_answers, ingest, summary};
use crate::config::PipelineConfig;
use crate::{io, Cli, CliError, Status};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Raw instructions.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Selected instructions (JSONL).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// jsonl or json (a single array).
    #[arg(long, default_value = "jsonl")]
    pub input_format: String,
    /// Skip the probe-model filter even when a probe is configured.
    #[arg(long)]
    pub no_probe: bool,
}

fn no_critic() -> Arc<ModelClient> {
    Arc::new(ModelClient::scripted("none", |_, _| Err(ClientError::Malformed("no critic configured".into()))))
}

pub fn run(cli: &Cli, cfg: &PipelineConfig, args: &Args) -> Result<Status, CliError> {
    let input = io::require(&args.input, &cfg.paths.instructions, "input")?;
    let output = io::require(&args.output, &cfg.paths.selected, "output")?;
    let format: SourceFormat = args.input_format.parse().map_err(CliError::Usage)?;
    let ingested = ingest(&input, format, &cfg.select.default_dataset)?;
    let mut status = if ingested.errors.is_empty() { Status::Clean } else { Status::Partial };
    let read = ingested.records.len();

    let mut kept = ingested.records;
    if cfg.select.mathqa {
        kept = corpus::select_mathqa(&kept, cfg.seed);
    }
    if cfg.select.numglue {
        kept = corpus::filter_numglue(&kept);
    }
    if cfg.select.tabmwp {
        kept = corpus::filter_tabmwp(&kept);
    }
    let after_rules = kept.len();

    let probe = cfg.models.probe.as_ref().filter(|_| !args.no_probe);
    let mut probe_errors = 0;
    if let Some(name) = probe {
        let gold = gold_answers(&kept);
        let client = cfg.client(name, &gold)?;
        let critic = match &cfg.models.critic {
            Some(c) => cfg.client(c, &gold)?,
            None => no_critic(),
        };
        let engine = cfg.engine(critic, None)?;
        if !cli.dry_run {
            let outcome =
                corpus::filter_by_probe_failure(&engine, &client, &kept, cfg.select.probe_attempts, cfg.jobs(cli.jobs));
            for (id, err) in &outcome.errors {
                log::warn!("{id}: probe failed: {err}");
            }
            probe_errors = outcome.errors.len();
            if probe_errors > 0 {
                status = Status::Partial;
            }
            kept = outcome.kept;
        }
    }

    if !cli.dry_run {
        let sink = io::create_output(&output, false)?;
        corpus::save(&kept, sink).map_err(|e| CliError::io(format!("writing {}", output.display()), e))?;
    }
    summary(
        cli.format,
        &[
            ("read", json!(read)),
            ("rejected_records", json!(ingested.errors.len())),
            ("after_rules", json!(after_rules)),
            ("probe", json!(probe.is_some() && !cli.dry_run)),
            ("probe_errors", json!(probe_errors)),
            ("kept", json!(kept.len())),
            ("dry_run", json!(cli.dry_run)),
        ],
    );
    Ok(status)
}
