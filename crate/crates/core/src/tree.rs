//! Instructions, action nodes and preference trees.
//!
//! A preference tree is rooted at an [`Instruction`]. Every node is one model
//! action at one turn. Correct actions end their trajectory; an incorrect
//! action may be expanded into the next turn after it has received an
//! observation and a critique.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Hard upper bound on the number of turns in any tree.
pub const MAX_TURNS: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    Math,
    Coding,
    Logic,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::Math => "Math",
            Task::Coding => "Coding",
            Task::Logic => "Logic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestCategory {
    Basic,
    Edge,
    Large,
    Given,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub input: String,
    pub expected_output: String,
    pub category: TestCategory,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default)]
    pub rationale: Option<String>,
    #[serde(default)]
    pub solutions: Vec<String>,
    #[serde(default)]
    pub test_cases: Vec<TestCase>,
}

/// A root problem together with its reference annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub dataset: String,
    pub task: Task,
    /// Tool-integrated (code execution) rather than text-only reasoning.
    pub tool_mode: bool,
    pub prompt: String,
    #[serde(default)]
    pub ground_truth: GroundTruth,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Instruction {
    /// Correctness can only be decided by an LLM judge: no tests and no answer.
    pub fn requires_judge(&self) -> bool {
        self.ground_truth.test_cases.is_empty() && self.ground_truth.answer.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReasoningSchema {
    ChainOfThought,
    ModularProgramming,
}

impl ReasoningSchema {
    pub const ALL: [ReasoningSchema; 2] =
        [ReasoningSchema::ChainOfThought, ReasoningSchema::ModularProgramming];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContentKind {
    Text,
    Code,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub exec_output: Option<String>,
    pub traceback: Option<String>,
    pub binary_feedback: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    pub text: String,
    pub author: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionNode {
    pub id: String,
    pub parent_id: Option<String>,
    pub turn: u8,
    pub content_kind: ContentKind,
    pub body: String,
    pub schema: ReasoningSchema,
    pub producer: String,
    pub correct: bool,
    pub observation: Option<Observation>,
    pub critique: Option<Critique>,
}

/// Content-addressed node id, stable across runs.
pub fn node_id(instruction_id: &str, parent_id: Option<&str>, turn: u8, body: &str) -> String {
    let mut h = Sha256::new();
    h.update(instruction_id.as_bytes());
    h.update([0]);
    h.update(parent_id.unwrap_or("").as_bytes());
    h.update([0, turn, 0]);
    h.update(body.as_bytes());
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Extracts fenced code blocks (```` ``` ```` with an optional language tag).
pub fn code_blocks(body: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<String> = None;
    for line in body.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            match current.take() {
                Some(block) => blocks.push(block),
                None => current = Some(String::new()),
            }
            continue;
        }
        if let Some(block) = current.as_mut() {
            block.push_str(line);
            block.push('\n');
        }
    }
    // an unterminated fence still counts as code
    if let Some(block) = current {
        blocks.push(block);
    }
    blocks
}

pub fn content_kind(body: &str) -> ContentKind {
    let mut in_code = false;
    let mut has_code = false;
    let mut has_text = false;
    for line in body.lines() {
        if line.trim_start().starts_with("```") {
            in_code = !in_code;
            has_code = true;
            continue;
        }
        if !in_code && !line.trim().is_empty() {
            has_text = true;
        }
    }
    match (has_code, has_text) {
        (true, true) => ContentKind::Mixed,
        (true, false) => ContentKind::Code,
        _ => ContentKind::Text,
    }
}

/// Recognises step-mark lines such as `Step 3: ...`.
///
/// The pattern holds a `{k}` placeholder for the step number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepMarker {
    pub pattern: String,
}

impl Default for StepMarker {
    fn default() -> Self {
        StepMarker { pattern: "Step {k}:".to_string() }
    }
}

impl StepMarker {
    pub fn new(pattern: impl Into<String>) -> Self {
        StepMarker { pattern: pattern.into() }
    }

    pub fn render(&self, k: usize) -> String {
        self.pattern.replace("{k}", &k.to_string())
    }

    fn match_line(&self, line: &str) -> bool {
        let line = line.trim_start();
        let (prefix, suffix) = match self.pattern.split_once("{k}") {
            Some(parts) => parts,
            None => return line.starts_with(self.pattern.as_str()),
        };
        let Some(rest) = line.strip_prefix(prefix) else {
            return false;
        };
        let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
        digits > 0 && rest[digits..].starts_with(suffix)
    }

    /// Byte offsets of every line that opens a step.
    pub fn step_starts(&self, body: &str) -> Vec<usize> {
        let mut starts = Vec::new();
        let mut offset = 0;
        for line in body.split_inclusive('\n') {
            if self.match_line(line) {
                starts.push(offset);
            }
            offset += line.len();
        }
        starts
    }

    /// Text from the last step mark to the end (the whole body when unmarked).
    pub fn final_step<'a>(&self, body: &'a str) -> &'a str {
        match self.step_starts(body).last() {
            Some(&start) => &body[start..],
            None => body,
        }
    }

    pub fn count_steps(&self, body: &str) -> usize {
        self.step_starts(body).len()
    }
}

/// Id sequence from a turn-1 node down to a leaf.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory(pub Vec<String>);

impl Trajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One earlier turn of interaction as seen by later turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub body: String,
    pub observation: Option<Observation>,
    pub critique: Option<Critique>,
}

impl From<&ActionNode> for ContextTurn {
    fn from(node: &ActionNode) -> Self {
        ContextTurn {
            body: node.body.clone(),
            observation: node.observation.clone(),
            critique: node.critique.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairOrigin {
    MultiTurn,
    Augmented,
    Additional,
}

/// A correct and an incorrect action sharing an interaction context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionPair {
    pub instruction_id: String,
    pub context: Vec<ContextTurn>,
    pub chosen: ActionNode,
    pub rejected: ActionNode,
    pub origin: PairOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PairViolation {
    #[error("chosen action {0} is not correct")]
    ChosenIncorrect(String),
    #[error("rejected action {0} is correct")]
    RejectedCorrect(String),
    #[error("multi-turn pair spans turns {0} and {1}")]
    TurnMismatch(u8, u8),
    #[error("augmented pair has both actions at turn {0}")]
    SameTurnAugmented(u8),
    #[error("multi-turn pair context has {got} turns, expected {expected}")]
    ContextLength { got: usize, expected: usize },
}

impl ActionPair {
    pub fn turn_chosen(&self) -> u8 {
        self.chosen.turn
    }

    pub fn turn_rejected(&self) -> u8 {
        self.rejected.turn
    }

    pub fn check(&self) -> Result<(), PairViolation> {
        if !self.chosen.correct {
            return Err(PairViolation::ChosenIncorrect(self.chosen.id.clone()));
        }
        if self.rejected.correct {
            return Err(PairViolation::RejectedCorrect(self.rejected.id.clone()));
        }
        match self.origin {
            PairOrigin::MultiTurn => {
                if self.turn_chosen() != self.turn_rejected() {
                    return Err(PairViolation::TurnMismatch(self.turn_chosen(), self.turn_rejected()));
                }
                let expected = usize::from(self.turn_chosen()) - 1;
                if self.context.len() != expected {
                    return Err(PairViolation::ContextLength { got: self.context.len(), expected });
                }
            }
            PairOrigin::Augmented => {
                if self.turn_chosen() == self.turn_rejected() {
                    return Err(PairViolation::SameTurnAugmented(self.turn_chosen()));
                }
            }
            PairOrigin::Additional => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    EmptyPrompt,
    MaxDepthOutOfRange(u8),
    KeyMismatch,
    TurnOutOfRange(u8),
    DepthExceeded(u8),
    RootWithParent,
    MissingParent,
    OrphanTurn,
    ParentMissing(String),
    TurnNotParentPlusOne,
    CorrectHasChild,
    CritiqueWithoutObservation,
    Cycle,
    BadAdditionalPair(String),
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::EmptyPrompt => write!(f, "instruction prompt is empty"),
            ViolationKind::MaxDepthOutOfRange(d) => write!(f, "max_depth {d} outside [1, {MAX_TURNS}]"),
            ViolationKind::KeyMismatch => write!(f, "map key differs from node id"),
            ViolationKind::TurnOutOfRange(t) => write!(f, "turn {t} is not positive"),
            ViolationKind::DepthExceeded(d) => write!(f, "depth exceeds {d}"),
            ViolationKind::RootWithParent => write!(f, "turn-1 node has a parent"),
            ViolationKind::MissingParent => write!(f, "node beyond turn 1 has no parent"),
            ViolationKind::OrphanTurn => write!(f, "node unreachable from a turn-1 node"),
            ViolationKind::ParentMissing(p) => write!(f, "parent {p} does not exist"),
            ViolationKind::TurnNotParentPlusOne => write!(f, "turn is not parent turn + 1"),
            ViolationKind::CorrectHasChild => write!(f, "correct node has child"),
            ViolationKind::CritiqueWithoutObservation => write!(f, "critique present without observation"),
            ViolationKind::Cycle => write!(f, "parent links form a cycle"),
            ViolationKind::BadAdditionalPair(why) => write!(f, "additional pair invalid: {why}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node_id: Option<String>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node_id {
            Some(id) => write!(f, "node {id}: {}", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TreeError {
    #[error("invalid tree: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: invalid tree: {}", join_violations(.violations))]
    InvalidLine { line: usize, violations: Vec<Violation> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

fn default_max_depth() -> u8 {
    MAX_TURNS
}

/// Preference tree for one instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TreeRecord", try_from = "TreeRecord")]
pub struct PreferenceTree {
    pub instruction: Instruction,
    pub nodes: BTreeMap<String, ActionNode>,
    pub max_depth: u8,
    /// Instruction-action pairs elicited from additional reference solutions.
    pub additional_pairs: Vec<ActionPair>,
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    instruction: Instruction,
    nodes: Vec<ActionNode>,
    #[serde(default = "default_max_depth")]
    max_depth: u8,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    additional_pairs: Vec<ActionPair>,
}

impl From<PreferenceTree> for TreeRecord {
    fn from(t: PreferenceTree) -> Self {
        TreeRecord {
            instruction: t.instruction,
            nodes: t.nodes.into_values().collect(),
            max_depth: t.max_depth,
            additional_pairs: t.additional_pairs,
        }
    }
}

impl TryFrom<TreeRecord> for PreferenceTree {
    type Error = String;

    fn try_from(r: TreeRecord) -> Result<Self, Self::Error> {
        let mut nodes = BTreeMap::new();
        for node in r.nodes {
            let id = node.id.clone();
            if nodes.insert(id.clone(), node).is_some() {
                return Err(format!("duplicate node id {id}"));
            }
        }
        Ok(PreferenceTree {
            instruction: r.instruction,
            nodes,
            max_depth: r.max_depth,
            additional_pairs: r.additional_pairs,
        })
    }
}

impl PreferenceTree {
    pub fn new(instruction: Instruction) -> Self {
        PreferenceTree {
            instruction,
            nodes: BTreeMap::new(),
            max_depth: MAX_TURNS,
            additional_pairs: Vec::new(),
        }
    }

    pub fn with_max_depth(mut self, max_depth: u8) -> Self {
        self.max_depth = max_depth;
        self
    }

    pub fn insert(&mut self, node: ActionNode) {
        self.nodes.insert(node.id.clone(), node);
    }

    pub fn node(&self, id: &str) -> Option<&ActionNode> {
        self.nodes.get(id)
    }

    /// Children of `parent` (turn-1 nodes for `None`), ordered by id.
    pub fn children<'a>(&'a self, parent: Option<&'a str>) -> impl Iterator<Item = &'a ActionNode> + 'a {
        self.nodes.values().filter(move |n| n.parent_id.as_deref() == parent)
    }

    /// Largest turn number present; 0 for an empty tree.
    pub fn depth(&self) -> u8 {
        self.nodes.values().map(|n| n.turn).max().unwrap_or(0)
    }

    /// Nodes from the turn-1 ancestor down to `id`, inclusive.
    pub fn path_to(&self, id: &str) -> Vec<&ActionNode> {
        let mut path = Vec::new();
        let mut cursor = self.nodes.get(id);
        while let Some(node) = cursor {
            path.push(node);
            if path.len() > self.nodes.len() {
                break;
            }
            cursor = node.parent_id.as_deref().and_then(|p| self.nodes.get(p));
        }
        path.reverse();
        path
    }

    /// Interaction context preceding a child of `parent`.
    pub fn context_for(&self, parent: Option<&str>) -> Vec<ContextTurn> {
        match parent {
            Some(p) => self.path_to(p).into_iter().map(ContextTurn::from).collect(),
            None => Vec::new(),
        }
    }

    /// The expansion chain: starting at turn 1, the smallest-id incorrect
    /// child of the previous chain node, for as long as one exists.
    pub fn main_chain(&self) -> Vec<&ActionNode> {
        let mut chain: Vec<&ActionNode> = Vec::new();
        loop {
            let parent = chain.last().map(|n| n.id.as_str());
            match self.children(parent).find(|n| !n.correct) {
                Some(next) if chain.len() < self.nodes.len() => chain.push(next),
                _ => break,
            }
        }
        chain
    }

    pub fn is_leaf(&self, id: &str) -> bool {
        !self.nodes.values().any(|n| n.parent_id.as_deref() == Some(id))
    }
}

/// Checks every structural rule and reports all violations found.
pub fn validate_tree(tree: &PreferenceTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let v = |node: Option<&str>, kind| Violation { node_id: node.map(str::to_string), kind };

    if tree.instruction.prompt.trim().is_empty() {
        out.push(v(None, ViolationKind::EmptyPrompt));
    }
    if tree.max_depth == 0 || tree.max_depth > MAX_TURNS {
        out.push(v(None, ViolationKind::MaxDepthOutOfRange(tree.max_depth)));
    }
    let cap = tree.max_depth.min(MAX_TURNS);

    let mut has_child = BTreeSet::new();
    let mut deepest: Option<&ActionNode> = None;
    for (key, node) in &tree.nodes {
        let id = Some(node.id.as_str());
        if key != &node.id {
            out.push(v(id, ViolationKind::KeyMismatch));
        }
        if node.turn == 0 {
            out.push(v(id, ViolationKind::TurnOutOfRange(node.turn)));
        }
        if node.turn > cap && deepest.is_none_or(|d| node.turn > d.turn) {
            deepest = Some(node);
        }
        if node.critique.is_some() && node.observation.is_none() {
            out.push(v(id, ViolationKind::CritiqueWithoutObservation));
        }
        match (&node.parent_id, node.turn) {
            (Some(_), 1) => out.push(v(id, ViolationKind::RootWithParent)),
            (None, t) if t > 1 => out.push(v(id, ViolationKind::MissingParent)),
            (Some(p), _) => match tree.nodes.get(p) {
                None => out.push(v(id, ViolationKind::ParentMissing(p.clone()))),
                Some(parent) => {
                    has_child.insert(p.as_str());
                    if parent.turn.checked_add(1) != Some(node.turn) {
                        out.push(v(id, ViolationKind::TurnNotParentPlusOne));
                    }
                }
            },
            (None, _) => {}
        }
    }
    if let Some(node) = deepest {
        out.push(v(Some(&node.id), ViolationKind::DepthExceeded(cap)));
    }
    for id in &has_child {
        if tree.nodes.get(*id).is_some_and(|n| n.correct) {
            out.push(v(Some(id), ViolationKind::CorrectHasChild));
        }
    }

    // reachability: walk parent links; a walk longer than the node count is a cycle
    for node in tree.nodes.values() {
        let mut cursor = node;
        let mut steps = 0;
        loop {
            match cursor.parent_id.as_deref() {
                None => {
                    if cursor.turn != 1 {
                        out.push(v(Some(&node.id), ViolationKind::OrphanTurn));
                    }
                    break;
                }
                Some(p) => match tree.nodes.get(p) {
                    Some(parent) => cursor = parent,
                    None => break,
                },
            }
            steps += 1;
            if steps > tree.nodes.len() {
                out.push(v(Some(&node.id), ViolationKind::Cycle));
                break;
            }
        }
    }

    for pair in &tree.additional_pairs {
        if pair.origin != PairOrigin::Additional {
            out.push(v(Some(&pair.chosen.id), ViolationKind::BadAdditionalPair("origin is not Additional".into())));
        } else if let Err(e) = pair.check() {
            out.push(v(Some(&pair.chosen.id), ViolationKind::BadAdditionalPair(e.to_string())));
        }
    }
    out
}

/// Every root-to-leaf path, ordered by node id at each level.
pub fn trajectories(tree: &PreferenceTree) -> Result<Vec<Trajectory>, TreeError> {
    let violations = validate_tree(tree);
    if !violations.is_empty() {
        return Err(TreeError::Invalid(violations));
    }
    let mut out = Vec::new();
    let mut stack: Vec<(Option<&str>, Vec<String>)> = vec![(None, Vec::new())];
    while let Some((parent, path)) = stack.pop() {
        let children: Vec<&ActionNode> = tree.children(parent).collect();
        if children.is_empty() {
            if !path.is_empty() {
                out.push(Trajectory(path));
            }
            continue;
        }
        // reversed so the smallest id is popped first
        for child in children.into_iter().rev() {
            let mut next = path.clone();
            next.push(child.id.clone());
            stack.push((Some(child.id.as_str()), next));
        }
    }
    Ok(out)
}

/// Writes one JSON tree per line.
pub fn save_trees<W: Write>(trees: &[PreferenceTree], mut sink: W) -> Result<(), TreeError> {
    for tree in trees {
        serde_json::to_writer(&mut sink, tree).map_err(std::io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

/// Reads trees written by [`save_trees`], validating each one.
pub fn load_trees<R: BufRead>(source: R) -> Result<Vec<PreferenceTree>, TreeError> {
    let mut trees = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tree: PreferenceTree =
            serde_json::from_str(&line).map_err(|source| TreeError::Parse { line: idx + 1, source })?;
        let violations = validate_tree(&tree);
        if !violations.is_empty() {
            return Err(TreeError::InvalidLine { line: idx + 1, violations });
        }
        trees.push(tree);
    }
    Ok(trees)
}
