pub mod build;
pub mod decontam;
pub mod export;
pub mod losslab;
pub mod rerank;
pub mod select;
pub mod stats;

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use preftree::corpus::{self, Ingested, SourceFormat};
use preftree::Instruction;
use serde_json::Value;

use crate::{io, CliError, Format};

/// Summary of a data-producing command, on stderr so stdout can carry data.
pub fn summary(format: Format, fields: &[(&str, Value)]) {
    match format {
        Format::Json => {
            let map: serde_json::Map<String, Value> = fields.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
            eprintln!("{}", Value::Object(map));
        }
        Format::Table => {
            let width = fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, v) in fields {
                let v = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                eprintln!("{k:<width$}  {v}");
            }
        }
    }
}

/// Instructions from JSONL or a JSON array; bad records are logged and skipped.
pub fn ingest(path: &Path, format: SourceFormat, default_dataset: &str) -> Result<Ingested, CliError> {
    let reader = io::open_input(path)?;
    let ingested = corpus::ingest(reader, format, default_dataset)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    for err in &ingested.errors {
        log::warn!("{}:{}: {}", path.display(), err.line, err.message);
    }
    Ok(ingested)
}

/// Prompt → reference answer, for mock endpoints.
pub fn gold_answers(instructions: &[Instruction]) -> Arc<HashMap<String, String>> {
    Arc::new(
        instructions
            .iter()
            .filter_map(|i| i.ground_truth.answer.clone().map(|a| (i.prompt.clone(), a)))
            .collect(),
    )
}
