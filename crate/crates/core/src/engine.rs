//! Actor → environment → critique interaction and preference-tree building.
//!
//! One turn asks an actor for candidate actions, executes their code in the
//! sandbox, judges them against the ground truth, and (for incorrect actions
//! that will be expanded) asks a distinct critique model for feedback. Tree
//! building repeats this for up to `max_depth` turns, expanding only the
//! incorrect action of each turn.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answer::{check_answer, outputs_match};
use crate::rng::keyed_rng;
use crate::client::{ChatMessage, ClientError, ModelClient};
use crate::sampling::{LadderReport, Sampler};
use crate::sandbox::{run_code, syntax_check, ExecLimits, ExecResponse, Sandbox, SandboxError};
use crate::template::{TemplateError, TemplateSet};
use crate::tree::{
    code_blocks, content_kind, node_id, validate_tree, ActionNode, ContentKind, ContextTurn, Critique,
    Instruction, Observation, PreferenceTree, ReasoningSchema, StepMarker, Task, TestCase,
    TestCategory, Violation, MAX_TURNS,
};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("model {model}: {source}")]
    Client {
        model: String,
        #[source]
        source: ClientError,
    },
    #[error("sandbox: {0}")]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("could not parse model output: {0}")]
    Parse(String),
    #[error("built tree violates invariants: {0:?}")]
    InvalidTree(Vec<Violation>),
}

fn client_err(client: &ModelClient) -> impl FnOnce(ClientError) -> EngineError + '_ {
    move |source| EngineError::Client { model: client.name.clone(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub exec_limits: ExecLimits,
    pub max_depth: u8,
    pub seed: u64,
    pub step_marker: StepMarker,
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            exec_limits: ExecLimits::default(),
            max_depth: MAX_TURNS,
            seed: 0,
            step_marker: StepMarker::default(),
        }
    }
}

impl EngineSettings {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(1..=MAX_TURNS).contains(&self.max_depth) {
            return Err(EngineError::Config(format!("max_depth {} outside [1, {MAX_TURNS}]", self.max_depth)));
        }
        if self.exec_limits.timeout_ms == 0 {
            return Err(EngineError::Config("exec timeout must be positive".into()));
        }
        Ok(())
    }
}

/// A candidate action before it has been judged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Draft {
    pub turn: u8,
    pub body: String,
    pub schema: ReasoningSchema,
    pub producer: String,
    pub content_kind: ContentKind,
    pub code: Vec<String>,
}

impl Draft {
    pub fn new(turn: u8, body: String, schema: ReasoningSchema, producer: &str) -> Self {
        Draft {
            turn,
            content_kind: content_kind(&body),
            code: code_blocks(&body),
            body,
            schema,
            producer: producer.to_string(),
        }
    }

    /// All code blocks joined into one program.
    pub fn program(&self) -> Option<String> {
        if self.code.is_empty() {
            None
        } else {
            Some(self.code.join("\n"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub index: usize,
    pub passed: bool,
    pub actual: String,
    pub traceback: Option<String>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VerdictDetail {
    Tests(Vec<CaseResult>),
    Answer { predicted: Option<String>, gold: String },
    Judge { rationale: String },
    NoCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalVerdict {
    pub correct: bool,
    pub detail: VerdictDetail,
    /// False for LLM-judge verdicts.
    pub rigorous: bool,
}

impl EvalVerdict {
    pub fn failing_cases(&self) -> Vec<usize> {
        match &self.detail {
            VerdictDetail::Tests(cases) => cases.iter().filter(|c| !c.passed).map(|c| c.index).collect(),
            _ => Vec::new(),
        }
    }
}

/// A judged draft with the observation shown to the critique model.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessed {
    pub draft: Draft,
    pub observation: Observation,
    pub verdict: EvalVerdict,
}

impl Assessed {
    pub fn into_node(self, instruction_id: &str, parent_id: Option<&str>) -> ActionNode {
        ActionNode {
            id: node_id(instruction_id, parent_id, self.draft.turn, &self.draft.body),
            parent_id: parent_id.map(str::to_string),
            turn: self.draft.turn,
            content_kind: self.draft.content_kind,
            body: self.draft.body,
            schema: self.draft.schema,
            producer: self.draft.producer,
            correct: self.verdict.correct,
            observation: Some(self.observation),
            critique: None,
        }
    }
}

/// Result of building one tree.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub tree: PreferenceTree,
    pub reports: Vec<LadderReport>,
}

pub fn sample_schema<R: Rng + ?Sized>(rng: &mut R) -> ReasoningSchema {
    if rng.gen_bool(0.5) {
        ReasoningSchema::ChainOfThought
    } else {
        ReasoningSchema::ModularProgramming
    }
}

/// Per-instruction generator so batch parallelism never changes outputs.
pub fn tree_rng(seed: u64, instruction_id: &str) -> ChaCha8Rng {
    keyed_rng(seed, instruction_id)
}

fn exec_failure_text(response: &ExecResponse) -> Option<String> {
    if response.timed_out {
        return Some("TimeoutError: execution exceeded the time limit".to_string());
    }
    if let Some(err) = &response.error {
        return Some(format!("ResourceError: {err}"));
    }
    if let Some(tb) = &response.traceback {
        return Some(tb.clone());
    }
    if response.exit_status != 0 {
        let stderr = response.stderr.trim();
        return Some(if stderr.is_empty() {
            format!("process exited with status {}", response.exit_status)
        } else {
            stderr.to_string()
        });
    }
    None
}

pub fn render_observation(obs: &Observation) -> String {
    let mut parts = Vec::new();
    if let Some(out) = obs.exec_output.as_deref().filter(|o| !o.is_empty()) {
        parts.push(format!("Out: {out}"));
    }
    if let Some(tb) = &obs.traceback {
        parts.push(tb.clone());
    }
    parts.push(if obs.binary_feedback {
        "Your answer is correct.".to_string()
    } else {
        "Your answer is wrong.".to_string()
    });
    parts.join("\n")
}

pub fn render_ground_truth(instruction: &Instruction) -> String {
    let gt = &instruction.ground_truth;
    let mut parts = Vec::new();
    if let Some(answer) = &gt.answer {
        parts.push(format!("Answer: {answer}"));
    }
    if let Some(rationale) = &gt.rationale {
        parts.push(format!("Rationale: {rationale}"));
    }
    if let Some(solution) = gt.solutions.first() {
        parts.push(format!("Solution:\n```python\n{}\n```", solution.trim_end()));
    }
    if parts.is_empty() {
        "(no reference available)".to_string()
    } else {
        parts.join("\n")
    }
}

pub struct Engine {
    pub critic: Arc<ModelClient>,
    pub judge: Option<Arc<ModelClient>>,
    pub sandbox: Arc<dyn Sandbox>,
    pub templates: TemplateSet,
    pub settings: EngineSettings,
}

impl Engine {
    pub fn new(critic: Arc<ModelClient>, sandbox: Arc<dyn Sandbox>, settings: EngineSettings) -> Result<Self, EngineError> {
        settings.validate()?;
        Ok(Engine { critic, judge: None, sandbox, templates: TemplateSet::builtin(), settings })
    }

    pub fn with_judge(mut self, judge: Arc<ModelClient>) -> Self {
        self.judge = Some(judge);
        self
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    fn marker_hint(&self) -> String {
        self.settings.step_marker.pattern.replace("{k}", "N")
    }

    pub fn render_feedback(&self, turn: &ContextTurn) -> Result<String, EngineError> {
        let observation = turn.observation.as_ref().map(render_observation).unwrap_or_default();
        let critique = turn.critique.as_ref().map(|c| c.text.as_str()).unwrap_or("");
        Ok(self.templates.render("feedback", &[("observation", &observation), ("critique", critique)])?)
    }

    /// Chat transcript for the actor: schema system prompt, the instruction,
    /// then each earlier action with its observation and critique. A `hint`
    /// replaces the instruction message at turn 1 and is appended to the last
    /// feedback message otherwise.
    pub fn actor_messages(
        &self,
        instruction: &Instruction,
        history: &[ContextTurn],
        schema: ReasoningSchema,
        hint: Option<&str>,
    ) -> Result<Vec<ChatMessage>, EngineError> {
        let system_template = match schema {
            ReasoningSchema::ChainOfThought => "actor_cot",
            ReasoningSchema::ModularProgramming => "actor_modular",
        };
        let marker = self.marker_hint();
        let mut messages = vec![
            ChatMessage::system(self.templates.render(system_template, &[("step_marker", &marker)])?),
            ChatMessage::user(instruction.prompt.clone()),
        ];
        for turn in history {
            messages.push(ChatMessage::assistant(turn.body.clone()));
            messages.push(ChatMessage::user(self.render_feedback(turn)?));
        }
        if let Some(hint) = hint {
            let last = messages.last_mut().expect("instruction message");
            if history.is_empty() {
                last.content = hint.to_string();
            } else {
                last.content.push_str("\n\n");
                last.content.push_str(hint);
            }
        }
        Ok(messages)
    }

    /// One candidate action for the next turn.
    pub fn run_action(
        &self,
        instruction: &Instruction,
        history: &[ContextTurn],
        client: &ModelClient,
        schema: ReasoningSchema,
    ) -> Result<Draft, EngineError> {
        let messages = self.actor_messages(instruction, history, schema, None)?;
        let body = client.complete_one(&messages).map_err(client_err(client))?;
        Ok(Draft::new(history.len() as u8 + 1, body, schema, &client.name))
    }

    /// `schemas.len()` candidates, one request per distinct schema. Output
    /// order follows `schemas`.
    pub fn sample_actions(
        &self,
        instruction: &Instruction,
        history: &[ContextTurn],
        client: &ModelClient,
        schemas: &[ReasoningSchema],
    ) -> Result<Vec<Draft>, EngineError> {
        let turn = history.len() as u8 + 1;
        let mut slots: Vec<Option<Draft>> = vec![None; schemas.len()];
        for schema in ReasoningSchema::ALL {
            let positions: Vec<usize> =
                schemas.iter().enumerate().filter(|(_, s)| **s == schema).map(|(i, _)| i).collect();
            if positions.is_empty() {
                continue;
            }
            let messages = self.actor_messages(instruction, history, schema, None)?;
            let texts = client.complete(&messages, positions.len() as u32).map_err(client_err(client))?;
            for (pos, text) in positions.into_iter().zip(texts) {
                slots[pos] = Some(Draft::new(turn, text, schema, &client.name));
            }
        }
        Ok(slots.into_iter().map(|d| d.expect("every slot filled")).collect())
    }

    /// Compile-only check of a draft's program; drafts without code pass.
    pub fn passes_syntax(&self, draft: &Draft) -> Result<bool, EngineError> {
        match draft.program() {
            Some(code) => Ok(syntax_check(self.sandbox.as_ref(), &code)?),
            None => Ok(true),
        }
    }

    fn run(&self, code: &str, stdin: &str) -> Result<ExecResponse, EngineError> {
        Ok(run_code(self.sandbox.as_ref(), code, stdin, self.settings.exec_limits)?)
    }

    fn run_tests(&self, code: &str, tests: &[TestCase]) -> Result<Vec<CaseResult>, EngineError> {
        tests
            .iter()
            .enumerate()
            .map(|(index, case)| {
                let response = self.run(code, &case.input)?;
                let failure = exec_failure_text(&response);
                Ok(CaseResult {
                    index,
                    passed: failure.is_none() && outputs_match(&response.stdout, &case.expected_output),
                    actual: response.stdout,
                    traceback: failure,
                    timed_out: response.timed_out,
                })
            })
            .collect()
    }

    fn judge_verdict(&self, body: &str, instruction: &Instruction) -> Result<EvalVerdict, EngineError> {
        let judge = self.judge.as_ref().ok_or_else(|| {
            EngineError::Config(format!("instruction {} has no ground truth and no judge is configured", instruction.id))
        })?;
        let prompt = self.templates.render("judge", &[("instruction", &instruction.prompt), ("action", body)])?;
        let reply = judge.complete_one(&[ChatMessage::user(prompt)]).map_err(client_err(judge))?;
        let verdict_line = reply.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").to_uppercase();
        let correct = verdict_line.contains("VERDICT") && !verdict_line.contains("INCORRECT") && verdict_line.contains("CORRECT");
        Ok(EvalVerdict { correct, detail: VerdictDetail::Judge { rationale: reply }, rigorous: false })
    }

    /// Executes the action (when it carries code and the task uses the
    /// interpreter) and judges it against the ground truth.
    pub fn assess(&self, draft: &Draft, instruction: &Instruction) -> Result<Assessed, EngineError> {
        let gt = &instruction.ground_truth;
        let program = draft.program();
        let executes = instruction.task == Task::Coding || instruction.tool_mode;

        let (observation, verdict) = if instruction.task == Task::Coding && !gt.test_cases.is_empty() {
            match &program {
                None => (
                    Observation { exec_output: None, traceback: None, binary_feedback: false, timed_out: false },
                    EvalVerdict { correct: false, detail: VerdictDetail::NoCode, rigorous: true },
                ),
                Some(code) => {
                    let cases = self.run_tests(code, &gt.test_cases)?;
                    let correct = cases.iter().all(|c| c.passed);
                    let first = &cases[0];
                    let observation = Observation {
                        exec_output: Some(first.actual.clone()),
                        traceback: first.traceback.clone(),
                        binary_feedback: correct,
                        timed_out: first.timed_out,
                    };
                    (observation, EvalVerdict { correct, detail: VerdictDetail::Tests(cases), rigorous: true })
                }
            }
        } else {
            let mut observation =
                Observation { exec_output: None, traceback: None, binary_feedback: false, timed_out: false };
            if let (true, Some(code)) = (executes, &program) {
                let response = self.run(code, "")?;
                observation.traceback = exec_failure_text(&response);
                observation.timed_out = response.timed_out;
                observation.exec_output = Some(response.stdout);
            }
            let verdict = match &gt.answer {
                Some(gold) => {
                    let marker = &self.settings.step_marker;
                    let from_output = observation
                        .exec_output
                        .as_deref()
                        .filter(|o| !o.trim().is_empty())
                        .map(|o| check_answer(o, gold, marker));
                    let check = match from_output {
                        Some(c) if c.predicted.is_some() => c,
                        _ => check_answer(&draft.body, gold, marker),
                    };
                    let correct = check.correct && observation.traceback.is_none();
                    EvalVerdict {
                        correct,
                        detail: VerdictDetail::Answer { predicted: check.predicted, gold: gold.clone() },
                        rigorous: true,
                    }
                }
                None => self.judge_verdict(&draft.body, instruction)?,
            };
            observation.binary_feedback = verdict.correct;
            (observation, verdict)
        };
        Ok(Assessed { draft: draft.clone(), observation, verdict })
    }

    pub fn evaluate(&self, draft: &Draft, instruction: &Instruction) -> Result<EvalVerdict, EngineError> {
        Ok(self.assess(draft, instruction)?.verdict)
    }

    pub fn observe(&self, draft: &Draft, instruction: &Instruction) -> Result<Observation, EngineError> {
        Ok(self.assess(draft, instruction)?.observation)
    }

    pub fn critique_messages(
        &self,
        instruction: &Instruction,
        history: &[ContextTurn],
        action: &str,
        observation: &Observation,
    ) -> Result<Vec<ChatMessage>, EngineError> {
        let history_text = if history.is_empty() {
            "(none)".to_string()
        } else {
            let mut parts = Vec::new();
            for (i, turn) in history.iter().enumerate() {
                parts.push(format!("Turn {}:\n{}\n{}", i + 1, turn.body, self.render_feedback(turn)?));
            }
            parts.join("\n\n")
        };
        let prompt = self.templates.render(
            "critique",
            &[
                ("instruction", &instruction.prompt),
                ("history", &history_text),
                ("action", action),
                ("observation", &render_observation(observation)),
                ("ground_truth", &render_ground_truth(instruction)),
            ],
        )?;
        Ok(vec![ChatMessage::user(prompt)])
    }

    /// Feedback from the critique model, given the reference solution.
    pub fn critique(
        &self,
        instruction: &Instruction,
        history: &[ContextTurn],
        action: &str,
        observation: &Observation,
    ) -> Result<Critique, EngineError> {
        let messages = self.critique_messages(instruction, history, action, observation)?;
        let text = self.critic.complete_one(&messages).map_err(client_err(&self.critic))?;
        Ok(Critique { text, author: self.critic.name.clone() })
    }

    /// Builds the preference tree for one instruction.
    pub fn build_tree(&self, instruction: &Instruction, sampler: &Sampler) -> Result<BuildOutcome, EngineError> {
        let mut rng = tree_rng(self.settings.seed, &instruction.id);
        let mut tree = PreferenceTree::new(instruction.clone()).with_max_depth(self.settings.max_depth);
        let mut reports = Vec::new();
        let mut parent: Option<String> = None;

        for turn in 1..=self.settings.max_depth {
            let history = tree.context_for(parent.as_deref());
            let (correct, mut report) = sampler.sample_correct(self, instruction, &history, &mut rng)?;
            let incorrect = sampler.sample_incorrect(self, instruction, &history, &mut rng)?;
            report.turn = turn;
            report.correct_found = correct.is_some();
            report.incorrect_found = incorrect.is_some();
            reports.push(report);

            if let Some(found) = correct {
                let node = found.into_node(&instruction.id, parent.as_deref());
                insert_unique(&mut tree, node);
            }
            let Some(found) = incorrect else { break };
            let mut node = found.into_node(&instruction.id, parent.as_deref());
            if turn < self.settings.max_depth {
                let observation = node.observation.clone().expect("assessed nodes carry observations");
                node.critique = Some(self.critique(instruction, &history, &node.body, &observation)?);
            }
            parent = Some(insert_unique(&mut tree, node));
        }

        if reports.iter().any(|r| r.elicited) && instruction.ground_truth.solutions.len() >= 2 {
            tree.additional_pairs = sampler.extra_pairs_for_hard(self, instruction, &mut rng)?;
        }

        let violations = validate_tree(&tree);
        if !violations.is_empty() {
            return Err(EngineError::InvalidTree(violations));
        }
        Ok(BuildOutcome { tree, reports })
    }

    /// Builds trees with at most `jobs` worker threads. Results keep input order.
    pub fn build_batch(
        &self,
        instructions: &[Instruction],
        sampler: &Sampler,
        jobs: usize,
    ) -> Vec<Result<BuildOutcome, EngineError>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build();
        match pool {
            Ok(pool) => pool.install(|| instructions.par_iter().map(|i| self.build_tree(i, sampler)).collect()),
            Err(e) => {
                log::warn!("thread pool unavailable ({e}); building sequentially");
                instructions.iter().map(|i| self.build_tree(i, sampler)).collect()
            }
        }
    }

    /// Asks `client` for 4 basic, 4 edge and 4 large inputs and labels each
    /// with the gold program's output. Inputs on which the gold program fails
    /// are dropped.
    pub fn generate_test_cases(
        &self,
        instruction: &Instruction,
        gold_solution: &str,
        client: &ModelClient,
    ) -> Result<Vec<TestCase>, EngineError> {
        let prompt = self
            .templates
            .render("testgen", &[("instruction", &instruction.prompt), ("solution", gold_solution)])?;
        let reply = client.complete_one(&[ChatMessage::user(prompt)]).map_err(client_err(client))?;
        let inputs = parse_test_inputs(&reply)?;
        let mut cases = Vec::new();
        for (category, input) in inputs {
            let response = self.run(gold_solution, &input)?;
            if !response.succeeded() {
                log::debug!("{}: gold solution failed on a generated input", instruction.id);
                continue;
            }
            cases.push(TestCase { input, expected_output: response.stdout, category });
        }
        if cases.is_empty() {
            log::warn!("{}: gold solution failed on every generated input", instruction.id);
        }
        Ok(cases)
    }
}

/// Inserts `node`, re-keying on the (unlikely) event of an id collision.
fn insert_unique(tree: &mut PreferenceTree, mut node: ActionNode) -> String {
    let base = node.id.clone();
    let mut k = 1;
    while tree.nodes.contains_key(&node.id) {
        node.id = format!("{base}-{k}");
        k += 1;
    }
    let id = node.id.clone();
    tree.insert(node);
    id
}

/// Parses `{"basic": [...], "edge": [...], "large": [...]}` out of a reply.
pub fn parse_test_inputs(reply: &str) -> Result<Vec<(TestCategory, String)>, EngineError> {
    let start = reply.find('{').ok_or_else(|| EngineError::Parse("no JSON object in reply".into()))?;
    let end = reply.rfind('}').ok_or_else(|| EngineError::Parse("no JSON object in reply".into()))?;
    if end < start {
        return Err(EngineError::Parse("no JSON object in reply".into()));
    }
    let value: serde_json::Value =
        serde_json::from_str(&reply[start..=end]).map_err(|e| EngineError::Parse(e.to_string()))?;
    let mut out = Vec::new();
    for (key, category) in [("basic", TestCategory::Basic), ("edge", TestCategory::Edge), ("large", TestCategory::Large)] {
        let items = value
            .get(key)
            .and_then(|v| v.as_array())
            .ok_or_else(|| EngineError::Parse(format!("missing array \"{key}\"")))?;
        for item in items {
            let text = match item {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                other => return Err(EngineError::Parse(format!("unsupported test input {other}"))),
            };
            out.push((category, text));
        }
    }
    Ok(out)
}
