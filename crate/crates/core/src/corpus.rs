//! Instruction ingestion, per-dataset selection filters and corpus statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::decontam::Tokenizer;
use crate::engine::{sample_schema, Engine, EngineError};
use crate::client::ModelClient;
use crate::pairs::PairRecord;
use crate::rng::keyed_rng;
use crate::tree::{trajectories, GroundTruth, Instruction, PreferenceTree, Task, MAX_TURNS};

pub const MATHQA_PER_PATTERN: usize = 5;
pub const NUMGLUE_DROPPED_TASKS: [u32; 3] = [5, 6, 7];
pub const TABMWP_KEPT_LEVELS: [u32; 2] = [4, 5];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingested {
    pub records: Vec<Instruction>,
    pub errors: Vec<RecordError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceFormat {
    /// One JSON object per line.
    #[default]
    Jsonl,
    /// A single JSON array of objects.
    JsonArray,
}

impl std::str::FromStr for SourceFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "jsonl" => Ok(SourceFormat::Jsonl),
            "json" => Ok(SourceFormat::JsonArray),
            other => Err(format!("unknown source format {other:?}")),
        }
    }
}

fn parse_task(v: &Value) -> Result<Task, String> {
    let s = v.as_str().ok_or("task must be a string")?;
    match s.to_ascii_lowercase().as_str() {
        "math" => Ok(Task::Math),
        "coding" | "code" => Ok(Task::Coding),
        "logic" => Ok(Task::Logic),
        other => Err(format!("unknown task {other:?}")),
    }
}

fn metadata_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

const KNOWN: &[&str] = &[
    "id", "dataset", "task", "tool_mode", "prompt", "ground_truth", "metadata", "answer", "rationale", "solutions",
    "test_cases",
];

/// One source record. Fields outside the instruction schema land in `metadata`.
pub fn parse_record(obj: &Map<String, Value>, default_dataset: &str) -> Result<Instruction, String> {
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("missing id".into()),
    };
    let prompt = match obj.get("prompt") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        _ => return Err(format!("{id}: missing prompt")),
    };
    let task = parse_task(obj.get("task").ok_or_else(|| format!("{id}: missing task"))?).map_err(|e| format!("{id}: {e}"))?;
    let dataset = obj.get("dataset").and_then(Value::as_str).unwrap_or(default_dataset).to_string();
    let tool_mode = match obj.get("tool_mode") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(format!("{id}: tool_mode must be a boolean")),
    };
    let mut ground_truth: GroundTruth = match obj.get("ground_truth") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| format!("{id}: ground_truth: {e}"))?,
        None => GroundTruth::default(),
    };
    if let Some(v) = obj.get("answer").filter(|v| !v.is_null()) {
        ground_truth.answer = Some(metadata_value(v));
    }
    if let Some(Value::String(s)) = obj.get("rationale") {
        ground_truth.rationale = Some(s.clone());
    }
    if let Some(v) = obj.get("solutions") {
        ground_truth.solutions = serde_json::from_value(v.clone()).map_err(|e| format!("{id}: solutions: {e}"))?;
    }
    if let Some(v) = obj.get("test_cases") {
        ground_truth.test_cases = serde_json::from_value(v.clone()).map_err(|e| format!("{id}: test_cases: {e}"))?;
    }
    let mut metadata = BTreeMap::new();
    if let Some(m) = obj.get("metadata") {
        let m = m.as_object().ok_or_else(|| format!("{id}: metadata must be an object"))?;
        for (k, v) in m {
            metadata.insert(k.clone(), metadata_value(v));
        }
    }
    for (k, v) in obj {
        if !KNOWN.contains(&k.as_str()) {
            metadata.insert(k.clone(), metadata_value(v));
        }
    }
    Ok(Instruction { id, dataset, task, tool_mode, prompt, ground_truth, metadata })
}

/// Parses a source dump. Bad records are reported and skipped.
pub fn ingest<R: BufRead>(source: R, format: SourceFormat, default_dataset: &str) -> std::io::Result<Ingested> {
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    let mut accept = |line: usize, value: Value, out: &mut Ingested| {
        let result = match value.as_object() {
            Some(obj) => parse_record(obj, default_dataset),
            None => Err("record is not a JSON object".into()),
        };
        match result {
            Ok(inst) if !seen.insert(inst.id.clone()) => {
                out.errors.push(RecordError { line, message: format!("duplicate id {}", inst.id) })
            }
            Ok(inst) => out.records.push(inst),
            Err(message) => out.errors.push(RecordError { line, message }),
        }
    };
    match format {
        SourceFormat::Jsonl => {
            for (i, line) in source.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Value>(&line) {
                    Ok(v) => accept(i + 1, v, &mut out),
                    Err(e) => out.errors.push(RecordError { line: i + 1, message: e.to_string() }),
                }
            }
        }
        SourceFormat::JsonArray => {
            let value: Value = serde_json::from_reader(source)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            let items = value
                .as_array()
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "expected a JSON array"))?;
            for (i, v) in items.iter().enumerate() {
                accept(i + 1, v.clone(), &mut out);
            }
        }
    }
    Ok(out)
}

pub fn save<W: Write>(instructions: &[Instruction], mut sink: W) -> std::io::Result<()> {
    for inst in instructions {
        serde_json::to_writer(&mut sink, inst)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

fn is_dataset(inst: &Instruction, name: &str) -> bool {
    inst.dataset.eq_ignore_ascii_case(name)
}

fn meta_u32(inst: &Instruction, keys: &[&str]) -> Option<u32> {
    keys.iter()
        .find_map(|k| inst.metadata.get(*k))
        .and_then(|v| v.trim().trim_start_matches("task").trim().parse().ok())
}

/// Formula pattern of a MathQA record.
pub fn mathqa_pattern(inst: &Instruction) -> Option<&str> {
    ["pattern", "linear_formula", "formula"].iter().find_map(|k| inst.metadata.get(*k)).map(String::as_str)
}

/// At most five MathQA problems per formula pattern. Within a pattern, problems
/// from rarer categories are preferred; equal-frequency categories are ordered
/// by a seeded shuffle. Other datasets and records without a pattern pass
/// through. Output keeps input order.
pub fn select_mathqa(instructions: &[Instruction], seed: u64) -> Vec<Instruction> {
    let mathqa: Vec<usize> = (0..instructions.len())
        .filter(|&i| is_dataset(&instructions[i], "MathQA") && mathqa_pattern(&instructions[i]).is_some())
        .collect();
    let mut category_freq: HashMap<&str, usize> = HashMap::new();
    for &i in &mathqa {
        *category_freq.entry(category(&instructions[i])).or_default() += 1;
    }
    let mut by_pattern: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &mathqa {
        by_pattern.entry(mathqa_pattern(&instructions[i]).unwrap()).or_default().push(i);
    }
    let mut keep: HashSet<usize> = HashSet::new();
    for (pattern, mut members) in by_pattern {
        if members.len() > MATHQA_PER_PATTERN {
            let mut rng = keyed_rng(seed, pattern);
            members.shuffle(&mut rng);
            members.sort_by_key(|&i| category_freq[category(&instructions[i])]);
            members.truncate(MATHQA_PER_PATTERN);
        }
        keep.extend(members);
    }
    instructions
        .iter()
        .enumerate()
        .filter(|(i, inst)| !is_dataset(inst, "MathQA") || mathqa_pattern(inst).is_none() || keep.contains(i))
        .map(|(_, inst)| inst.clone())
        .collect()
}

fn category(inst: &Instruction) -> &str {
    inst.metadata.get("category").map(String::as_str).unwrap_or("")
}

/// Drops NumGLUE tasks 5, 6 and 7.
pub fn filter_numglue(instructions: &[Instruction]) -> Vec<Instruction> {
    instructions
        .iter()
        .filter(|inst| {
            !is_dataset(inst, "NumGLUE")
                || !meta_u32(inst, &["task_id", "numglue_task", "type"]).is_some_and(|t| NUMGLUE_DROPPED_TASKS.contains(&t))
        })
        .cloned()
        .collect()
}

/// Keeps TabMWP problems of difficulty 4 or 5. Records without a level are dropped.
pub fn filter_tabmwp(instructions: &[Instruction]) -> Vec<Instruction> {
    instructions
        .iter()
        .filter(|inst| {
            if !is_dataset(inst, "TabMWP") {
                return true;
            }
            match meta_u32(inst, &["difficulty", "level", "grade_level"]) {
                Some(level) => TABMWP_KEPT_LEVELS.contains(&level),
                None => {
                    log::warn!("{}: TabMWP record without difficulty dropped", inst.id);
                    false
                }
            }
        })
        .cloned()
        .collect()
}

#[derive(Debug, Default)]
pub struct ProbeOutcome {
    pub kept: Vec<Instruction>,
    pub errors: Vec<(String, EngineError)>,
}

/// Keeps instructions the probe model fails on every one of `k` attempts.
pub fn filter_by_probe_failure(
    engine: &Engine,
    probe: &ModelClient,
    instructions: &[Instruction],
    k: u32,
    jobs: usize,
) -> ProbeOutcome {
    let k = k.max(1);
    let screen = |inst: &Instruction| -> Result<bool, EngineError> {
        let mut rng = keyed_rng(engine.settings.seed, &format!("probe/{}", inst.id));
        let schemas: Vec<_> = (0..k).map(|_| sample_schema(&mut rng)).collect();
        let drafts = engine.sample_actions(inst, &[], probe, &schemas)?;
        for draft in &drafts {
            if engine.evaluate(draft, inst)?.correct {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let results: Vec<Result<bool, EngineError>> = match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(|| instructions.par_iter().map(screen).collect()),
        Err(_) => instructions.iter().map(screen).collect(),
    };
    let mut out = ProbeOutcome::default();
    for (inst, result) in instructions.iter().zip(results) {
        match result {
            Ok(true) => out.kept.push(inst.clone()),
            Ok(false) => {}
            Err(e) => out.errors.push((inst.id.clone(), e)),
        }
    }
    out
}

/// Whether the instruction's trees come from multi-turn interaction.
pub fn interaction_mode(inst: &Instruction) -> bool {
    match inst.metadata.get("interaction").map(|s| s.to_ascii_lowercase()) {
        Some(v) => !matches!(v.as_str(), "false" | "0" | "no" | "single"),
        None => true,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub task: String,
    pub tool_mode: String,
    pub interaction: String,
    pub n_instructions: usize,
    /// Trajectories ending at turn 1..=5.
    pub turns: [usize; MAX_TURNS as usize],
    pub n_trajectories: usize,
    pub tokens_per_trajectory: f64,
    pub trajectories_per_instruction: f64,
    pub total_pairs: usize,
    pub correct_answers: usize,
    #[serde(skip)]
    token_sum: usize,
}

impl StatsRow {
    fn finish(&mut self) {
        self.tokens_per_trajectory =
            if self.n_trajectories == 0 { 0.0 } else { self.token_sum as f64 / self.n_trajectories as f64 };
        self.trajectories_per_instruction =
            if self.n_instructions == 0 { 0.0 } else { self.n_trajectories as f64 / self.n_instructions as f64 };
    }

    fn absorb(&mut self, other: &StatsRow) {
        self.n_instructions += other.n_instructions;
        for (a, b) in self.turns.iter_mut().zip(other.turns) {
            *a += b;
        }
        self.n_trajectories += other.n_trajectories;
        self.total_pairs += other.total_pairs;
        self.correct_answers += other.correct_answers;
        self.token_sum += other.token_sum;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub rows: Vec<StatsRow>,
    pub total: StatsRow,
}

/// Table-style statistics grouped by task, tool use and interaction mode.
/// Pairs are attributed through their instruction id.
pub fn stats(trees: &[PreferenceTree], pairs: &[PairRecord], tokenizer: Tokenizer) -> CorpusStats {
    let key_of = |inst: &Instruction| {
        (
            inst.task.to_string(),
            if inst.tool_mode { "yes" } else { "no" }.to_string(),
            if interaction_mode(inst) { "multi" } else { "single" }.to_string(),
        )
    };
    let mut groups: BTreeMap<(String, String, String), StatsRow> = BTreeMap::new();
    let mut owner: HashMap<&str, (String, String, String)> = HashMap::new();
    for tree in trees {
        let key = key_of(&tree.instruction);
        owner.insert(&tree.instruction.id, key.clone());
        let row = groups.entry(key.clone()).or_insert_with(|| StatsRow {
            task: key.0.clone(),
            tool_mode: key.1.clone(),
            interaction: key.2.clone(),
            ..StatsRow::default()
        });
        row.n_instructions += 1;
        row.correct_answers += tree.nodes.values().filter(|n| n.correct).count();
        let paths = match trajectories(tree) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("{}: skipping trajectories of invalid tree: {e}", tree.instruction.id);
                continue;
            }
        };
        for path in paths {
            let depth = path.len();
            if (1..=MAX_TURNS as usize).contains(&depth) {
                row.turns[depth - 1] += 1;
            }
            row.n_trajectories += 1;
            row.token_sum += path.0.iter().filter_map(|id| tree.node(id)).map(|n| tokenizer(&n.body).len()).sum::<usize>();
        }
    }
    for pair in pairs {
        match owner.get(pair.meta.instruction_id.as_str()) {
            Some(key) => groups.get_mut(key).expect("group exists").total_pairs += 1,
            None => log::warn!("pair for unknown instruction {}", pair.meta.instruction_id),
        }
    }
    let mut total = StatsRow { task: "Total".into(), tool_mode: "-".into(), interaction: "-".into(), ..StatsRow::default() };
    let mut rows: Vec<StatsRow> = groups.into_values().collect();
    for row in &mut rows {
        row.finish();
        total.absorb(row);
    }
    total.finish();
    CorpusStats { rows, total }
}

impl CorpusStats {
    pub fn to_table(&self) -> String {
        let header = [
            "Task", "Tool", "Interact", "#Instr", "T1", "T2", "T3", "T4", "T5", "#Traj", "Tok/Traj", "Traj/Instr", "#Pairs",
            "#Correct",
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for row in self.rows.iter().chain(std::iter::once(&self.total)) {
            let mut line = vec![row.task.clone(), row.tool_mode.clone(), row.interaction.clone(), row.n_instructions.to_string()];
            line.extend(row.turns.iter().map(|t| t.to_string()));
            line.push(row.n_trajectories.to_string());
            line.push(format!("{:.1}", row.tokens_per_trajectory));
            line.push(format!("{:.2}", row.trajectories_per_instruction));
            line.push(row.total_pairs.to_string());
            line.push(row.correct_answers.to_string());
            cells.push(line);
        }
        let widths: Vec<usize> =
            (0..header.len()).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for line in &cells {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| if c < 3 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        }
        out
    }
}
