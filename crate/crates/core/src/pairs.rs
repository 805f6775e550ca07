//! Preference pairs and training-set export.
//!
//! Multi-turn pairs come straight from sibling correct/incorrect actions.
//! Augmented pairs match correct actions with incorrect actions of other
//! turns along the expansion chain, under a product cap, a per-instruction
//! pair cap and a per-action occurrence cap.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::ChatMessage;
use crate::engine::render_observation;
use crate::rng::keyed_rng;
use crate::template::TemplateSet;
use crate::tree::{ActionNode, ActionPair, ContextTurn, PairOrigin, PreferenceTree, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Skip instructions with more than this many correct×incorrect combinations.
    pub product_cap: usize,
    pub max_pairs: usize,
    pub max_occurrence: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { product_cap: 10, max_pairs: 9, max_occurrence: 3, seed: 0 }
    }
}

impl AugmentConfig {
    /// Upper bound on draws, accepted or rejected.
    pub fn draw_limit(&self) -> usize {
        10 * self.max_pairs
    }
}

/// One pair per turn where some parent has both a correct and an incorrect
/// child; the context is the path to that parent.
pub fn multiturn_pairs(tree: &PreferenceTree) -> Vec<ActionPair> {
    let mut pairs = Vec::new();
    for turn in 1..=tree.depth() {
        let parents: Vec<Option<&str>> = if turn == 1 {
            vec![None]
        } else {
            tree.nodes.values().filter(|n| n.turn == turn - 1 && !n.correct).map(|n| Some(n.id.as_str())).collect()
        };
        for parent in parents {
            let chosen = tree.children(parent).find(|n| n.correct);
            let rejected = tree.children(parent).find(|n| !n.correct);
            if let (Some(chosen), Some(rejected)) = (chosen, rejected) {
                pairs.push(ActionPair {
                    instruction_id: tree.instruction.id.clone(),
                    context: tree.context_for(parent),
                    chosen: chosen.clone(),
                    rejected: rejected.clone(),
                    origin: PairOrigin::MultiTurn,
                });
                break;
            }
        }
    }
    pairs
}

/// Correct actions hanging off the expansion chain, and the chain's
/// incorrect actions, each ordered by turn.
pub fn augment_sides(tree: &PreferenceTree) -> (Vec<&ActionNode>, Vec<&ActionNode>) {
    let chain = tree.main_chain();
    let mut correct: Vec<&ActionNode> = tree.children(None).filter(|n| n.correct).collect();
    for link in &chain {
        correct.extend(tree.children(Some(link.id.as_str())).filter(|n| n.correct));
    }
    correct.sort_by(|a, b| (a.turn, &a.id).cmp(&(b.turn, &b.id)));
    (correct, chain)
}

/// Correct × incorrect combinations at different turns, row-major over
/// [`augment_sides`].
pub fn augment_candidates<'a>(correct: &[&'a ActionNode], incorrect: &[&'a ActionNode]) -> Vec<(&'a ActionNode, &'a ActionNode)> {
    let mut out = Vec::new();
    for c in correct {
        for i in incorrect {
            if c.turn != i.turn {
                out.push((*c, *i));
            }
        }
    }
    out
}

/// Single-turn pairs across turns.
///
/// Draws candidates uniformly without replacement (`gen_range` over the
/// remaining list, order-preserving removal), rejecting any draw that would
/// push an action past `max_occurrence`, until `max_pairs` are accepted, the
/// candidates run out, or [`AugmentConfig::draw_limit`] draws were made.
pub fn augment_pairs(tree: &PreferenceTree, cfg: &AugmentConfig) -> Vec<ActionPair> {
    let (correct, incorrect) = augment_sides(tree);
    if correct.len() * incorrect.len() > cfg.product_cap {
        return Vec::new();
    }
    let mut remaining = augment_candidates(&correct, &incorrect);
    let mut rng = keyed_rng(cfg.seed, &tree.instruction.id);
    let mut uses: HashMap<&str, usize> = HashMap::new();
    let mut pairs = Vec::new();
    let mut draws = 0;
    while pairs.len() < cfg.max_pairs && !remaining.is_empty() && draws < cfg.draw_limit() {
        let (c, i) = remaining.remove(rng.gen_range(0..remaining.len()));
        draws += 1;
        let c_uses = uses.get(c.id.as_str()).copied().unwrap_or(0);
        let i_uses = uses.get(i.id.as_str()).copied().unwrap_or(0);
        if c_uses >= cfg.max_occurrence || i_uses >= cfg.max_occurrence {
            continue;
        }
        uses.insert(c.id.as_str(), c_uses + 1);
        uses.insert(i.id.as_str(), i_uses + 1);
        pairs.push(ActionPair {
            instruction_id: tree.instruction.id.clone(),
            context: Vec::new(),
            chosen: c.clone(),
            rejected: i.clone(),
            origin: PairOrigin::Augmented,
        });
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SftMode {
    /// Correct leaves of each tree.
    #[default]
    LeafOnly,
    /// Every correct action, including those of additional pairs.
    AllCorrect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub instruction_id: String,
    pub node_id: String,
    pub turn: u8,
    pub dataset: String,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub response: String,
    pub meta: SftMeta,
}

/// Prompt/response records with the interaction history discarded.
pub fn export_sft(trees: &[PreferenceTree], mode: SftMode) -> Vec<SftRecord> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for tree in trees {
        let mut nodes: Vec<&ActionNode> = tree
            .nodes
            .values()
            .filter(|n| n.correct && (mode == SftMode::AllCorrect || tree.is_leaf(&n.id)))
            .collect();
        if mode == SftMode::AllCorrect {
            nodes.extend(tree.additional_pairs.iter().map(|p| &p.chosen));
        }
        nodes.sort_by(|a, b| (a.turn, &a.id).cmp(&(b.turn, &b.id)));
        for node in nodes {
            let key = (tree.instruction.prompt.clone(), node.body.clone());
            if !seen.insert(key) {
                continue;
            }
            out.push(SftRecord {
                prompt: tree.instruction.prompt.clone(),
                response: node.body.clone(),
                meta: SftMeta {
                    instruction_id: tree.instruction.id.clone(),
                    node_id: node.id.clone(),
                    turn: node.turn,
                    dataset: tree.instruction.dataset.clone(),
                    task: tree.instruction.task,
                },
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub instruction_id: String,
    pub chosen_id: String,
    pub rejected_id: String,
    pub turn_chosen: u8,
    pub turn_rejected: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub context: Vec<ChatMessage>,
    pub chosen: String,
    pub rejected: String,
    pub origin: PairOrigin,
    pub meta: PairMeta,
}

/// Feedback message shown to the actor after an earlier turn.
pub fn feedback_message(templates: &TemplateSet, turn: &ContextTurn) -> String {
    let observation = turn.observation.as_ref().map(render_observation).unwrap_or_default();
    let critique = turn.critique.as_ref().map(|c| c.text.as_str()).unwrap_or("");
    templates
        .render("feedback", &[("observation", &observation), ("critique", critique)])
        .unwrap_or_else(|_| format!("{observation}\n\n{critique}"))
}

/// Renders a pair's context as a chat transcript: the instruction, then each
/// earlier action (assistant) followed by its feedback (user).
pub fn pair_record(tree: &PreferenceTree, pair: &ActionPair, templates: &TemplateSet) -> PairRecord {
    let mut context = vec![ChatMessage::user(tree.instruction.prompt.clone())];
    for turn in &pair.context {
        context.push(ChatMessage::assistant(turn.body.clone()));
        context.push(ChatMessage::user(feedback_message(templates, turn)));
    }
    PairRecord {
        context,
        chosen: pair.chosen.body.clone(),
        rejected: pair.rejected.body.clone(),
        origin: pair.origin,
        meta: PairMeta {
            instruction_id: pair.instruction_id.clone(),
            chosen_id: pair.chosen.id.clone(),
            rejected_id: pair.rejected.id.clone(),
            turn_chosen: pair.turn_chosen(),
            turn_rejected: pair.turn_rejected(),
        },
    }
}

/// All pairs of one tree in export order: multi-turn, augmented, additional.
pub fn tree_pairs(tree: &PreferenceTree, cfg: &AugmentConfig) -> Vec<ActionPair> {
    let mut pairs = multiturn_pairs(tree);
    pairs.extend(augment_pairs(tree, cfg));
    pairs.extend(tree.additional_pairs.iter().cloned());
    pairs
}

/// Preference records for every tree whose correctness was decided
/// rigorously; judge-evaluated instructions contribute nothing.
pub fn export_preference(trees: &[PreferenceTree], cfg: &AugmentConfig) -> Vec<PairRecord> {
    let templates = TemplateSet::builtin();
    let mut out = Vec::new();
    for tree in trees {
        if tree.instruction.requires_judge() {
            continue;
        }
        for pair in tree_pairs(tree, cfg) {
            match pair.check() {
                Ok(()) => out.push(pair_record(tree, &pair, &templates)),
                Err(e) => log::warn!("{}: dropping pair: {e}", tree.instruction.id),
            }
        }
    }
    out
}

pub fn write_jsonl<T: Serialize, W: Write>(records: &[T], mut sink: W) -> std::io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut sink, record)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}
