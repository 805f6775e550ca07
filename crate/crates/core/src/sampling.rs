//! Sampling of correct and incorrect actions for one turn.
//!
//! Correct actions come from an escalating ladder: a round of
//! `samples_per_round` candidates from the cheapest tier, then further rounds
//! on progressively stronger tiers, and finally generation grounded in the
//! reference annotations. Incorrect actions come from one model drawn
//! uniformly from a diverse pool. Any candidate whose code fails the syntax
//! check is discarded.

use std::sync::Arc;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::answer::{numbers_equal, numeric_tokens, parse_number};
use crate::client::ModelClient;
use crate::engine::{sample_schema, Assessed, Draft, Engine, EngineError};
use crate::tree::{ActionPair, ContextTurn, Instruction, PairOrigin, ReasoningSchema, Task};

pub const MASK_TOKEN: &str = "<mask>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderBudget {
    pub samples_per_round: u32,
    pub max_rounds: u32,
}

impl Default for LadderBudget {
    fn default() -> Self {
        LadderBudget { samples_per_round: 20, max_rounds: 3 }
    }
}

/// Actor models ordered from cheapest to strongest.
#[derive(Debug, Clone)]
pub struct ModelTierList(Vec<Arc<ModelClient>>);

impl ModelTierList {
    pub fn new(tiers: Vec<Arc<ModelClient>>) -> Result<Self, EngineError> {
        if tiers.is_empty() {
            return Err(EngineError::Config("tier list is empty".into()));
        }
        Ok(ModelTierList(tiers))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Round `r` uses tier `min(r, len - 1)`.
    pub fn for_round(&self, round: u32) -> (usize, &Arc<ModelClient>) {
        let idx = (round as usize).min(self.0.len() - 1);
        (idx, &self.0[idx])
    }

    pub fn first(&self) -> &Arc<ModelClient> {
        &self.0[0]
    }
}

/// Models that supply rejected actions.
#[derive(Debug, Clone)]
pub struct IncorrectPool(Vec<Arc<ModelClient>>);

impl IncorrectPool {
    pub fn new(models: Vec<Arc<ModelClient>>) -> Result<Self, EngineError> {
        if models.is_empty() {
            return Err(EngineError::Config("incorrect-action pool is empty".into()));
        }
        Ok(IncorrectPool(models))
    }

    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &Arc<ModelClient> {
        &self.0[rng.gen_range(0..self.0.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    pub tier: usize,
    pub samples: u32,
    pub n_correct: u32,
}

/// Audit record of one turn's sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderReport {
    pub instruction_id: String,
    pub turn: u8,
    pub rounds: Vec<RoundReport>,
    pub elicited: bool,
    #[serde(default)]
    pub elicit_attempts: u32,
    #[serde(default)]
    pub correct_found: bool,
    #[serde(default)]
    pub incorrect_found: bool,
}

impl LadderReport {
    pub fn samples_used(&self) -> u32 {
        self.rounds.iter().map(|r| r.samples).sum::<u32>() + self.elicit_attempts
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub text: String,
    pub masked: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Replaces every standalone occurrence of the final answer in `rationale`.
///
/// Numeric answers match by value (`3.50` masks for `3.5`); other answers
/// match whole tokens exactly.
pub fn mask_answer_numbers(rationale: &str, final_answer: &str) -> Masked {
    let answer = final_answer.trim();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    if let Some(gold) = parse_number(answer) {
        for tok in numeric_tokens(rationale) {
            let glued_right = rationale[tok.end..].chars().next().is_some_and(is_word_char);
            if !glued_right && numbers_equal(tok.value, gold) {
                spans.push((tok.start, tok.end));
            }
        }
    } else if !answer.is_empty() {
        let pattern = format!(r"(^|[^\w]){}($|[^\w])", regex::escape(answer));
        let re = Regex::new(&pattern).expect("escaped answer pattern");
        let mut at = 0;
        while let Some(caps) = re.captures_at(rationale, at) {
            let lead = caps.get(1).expect("group 1");
            let start = lead.end();
            let end = start + answer.len();
            spans.push((start, end));
            at = end;
        }
    }
    if spans.is_empty() {
        log::warn!("answer {answer:?} does not occur in the rationale; nothing masked");
    }
    let mut text = String::with_capacity(rationale.len());
    let mut last = 0;
    for &(start, end) in &spans {
        text.push_str(&rationale[last..start]);
        text.push_str(MASK_TOKEN);
        last = end;
    }
    text.push_str(&rationale[last..]);
    Masked { text, masked: spans.len() }
}

/// Why ground-truth elicitation produced nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElicitFailure {
    NoAnnotation(String),
    NotCorrect { attempts: u32 },
}

pub struct Sampler {
    pub tiers: ModelTierList,
    pub pool: IncorrectPool,
    pub budget: LadderBudget,
    /// Generator used for ground-truth elicitation.
    pub elicitor: Arc<ModelClient>,
    pub elicit_retries: u32,
}

impl Sampler {
    pub fn new(tiers: ModelTierList, pool: IncorrectPool, elicitor: Arc<ModelClient>) -> Self {
        Sampler { tiers, pool, budget: LadderBudget::default(), elicitor, elicit_retries: 1 }
    }

    pub fn with_budget(mut self, budget: LadderBudget) -> Self {
        self.budget = budget;
        self
    }

    fn schemas<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<ReasoningSchema> {
        (0..self.budget.samples_per_round).map(|_| sample_schema(rng)).collect()
    }

    /// The escalating ladder for one turn.
    pub fn sample_correct<R: Rng + ?Sized>(
        &self,
        engine: &Engine,
        instruction: &Instruction,
        history: &[ContextTurn],
        rng: &mut R,
    ) -> Result<(Option<Assessed>, LadderReport), EngineError> {
        let mut report = LadderReport {
            instruction_id: instruction.id.clone(),
            turn: history.len() as u8 + 1,
            rounds: Vec::new(),
            elicited: false,
            elicit_attempts: 0,
            correct_found: false,
            incorrect_found: false,
        };
        for round in 0..self.budget.max_rounds {
            let (tier, client) = self.tiers.for_round(round);
            let schemas = self.schemas(rng);
            let drafts = engine.sample_actions(instruction, history, client, &schemas)?;
            let mut correct = Vec::new();
            for draft in &drafts {
                if !engine.passes_syntax(draft)? {
                    continue;
                }
                let assessed = engine.assess(draft, instruction)?;
                if assessed.verdict.correct {
                    correct.push(assessed);
                }
            }
            report.rounds.push(RoundReport {
                tier,
                samples: drafts.len() as u32,
                n_correct: correct.len() as u32,
            });
            if !correct.is_empty() {
                let pick = rng.gen_range(0..correct.len());
                report.correct_found = true;
                return Ok((Some(correct.swap_remove(pick)), report));
            }
        }

        report.elicited = true;
        let (found, attempts) = match self.elicit_with_ground_truth(engine, instruction, history, rng)? {
            Ok((assessed, attempts)) => (Some(assessed), attempts),
            Err(ElicitFailure::NotCorrect { attempts }) => (None, attempts),
            Err(ElicitFailure::NoAnnotation(reason)) => {
                log::debug!("{}: elicitation skipped: {reason}", instruction.id);
                (None, 0)
            }
        };
        report.elicit_attempts = attempts;
        report.correct_found = found.is_some();
        Ok((found, report))
    }

    /// Generation grounded in the reference annotations, dispatched on task
    /// and tool mode. Returns the judged action and the number of attempts.
    pub fn elicit_with_ground_truth<R: Rng + ?Sized>(
        &self,
        engine: &Engine,
        instruction: &Instruction,
        history: &[ContextTurn],
        rng: &mut R,
    ) -> Result<Result<(Assessed, u32), ElicitFailure>, EngineError> {
        let gt = &instruction.ground_truth;
        if instruction.task == Task::Coding {
            return match gt.solutions.first() {
                Some(solution) => self.elicit_from_solution(engine, instruction, history, solution),
                None => Ok(Err(ElicitFailure::NoAnnotation("no reference solution".into()))),
            };
        }
        if !instruction.tool_mode {
            let (Some(rationale), Some(answer)) = (&gt.rationale, &gt.answer) else {
                return Ok(Err(ElicitFailure::NoAnnotation("no rationale and answer".into())));
            };
            let masked = mask_answer_numbers(rationale, answer);
            let hint = engine.templates.render(
                "elicit_math_text",
                &[
                    ("instruction", &instruction.prompt),
                    ("rationale", &masked.text),
                    ("step_marker", &engine.settings.step_marker.render(1)),
                ],
            )?;
            return self.attempt(engine, instruction, history, ReasoningSchema::ChainOfThought, &hint);
        }

        // tool mode: translate the rationale into code, then plan directly or
        // rewrite it as modular tools
        let code = match (&gt.rationale, gt.solutions.first()) {
            (Some(rationale), _) => {
                let prompt = engine
                    .templates
                    .render("rationale_to_code", &[("instruction", &instruction.prompt), ("rationale", rationale)])?;
                let reply = self
                    .elicitor
                    .complete_one(&[crate::client::ChatMessage::user(prompt)])
                    .map_err(|source| EngineError::Client { model: self.elicitor.name.clone(), source })?;
                crate::tree::code_blocks(&reply).into_iter().next().unwrap_or(reply)
            }
            (None, Some(solution)) => solution.clone(),
            (None, None) => return Ok(Err(ElicitFailure::NoAnnotation("no rationale or solution".into()))),
        };
        let (template, schema) = if rng.gen_bool(0.5) {
            ("elicit_math_tool", ReasoningSchema::ChainOfThought)
        } else {
            ("elicit_math_modular", ReasoningSchema::ModularProgramming)
        };
        let hint = engine.templates.render(
            template,
            &[
                ("instruction", &instruction.prompt),
                ("code", code.trim_end()),
                ("step_marker", &engine.settings.step_marker.render(1)),
            ],
        )?;
        self.attempt(engine, instruction, history, schema, &hint)
    }

    /// Elicits a correct action grounded in one specific reference solution.
    pub fn elicit_from_solution(
        &self,
        engine: &Engine,
        instruction: &Instruction,
        history: &[ContextTurn],
        solution: &str,
    ) -> Result<Result<(Assessed, u32), ElicitFailure>, EngineError> {
        let hint = engine.templates.render(
            "elicit_code",
            &[
                ("instruction", &instruction.prompt),
                ("solution", solution.trim_end()),
                ("step_marker", &engine.settings.step_marker.render(1)),
            ],
        )?;
        self.attempt(engine, instruction, history, ReasoningSchema::ChainOfThought, &hint)
    }

    fn attempt(
        &self,
        engine: &Engine,
        instruction: &Instruction,
        history: &[ContextTurn],
        schema: ReasoningSchema,
        hint: &str,
    ) -> Result<Result<(Assessed, u32), ElicitFailure>, EngineError> {
        let messages = engine.actor_messages(instruction, history, schema, Some(hint))?;
        let attempts = 1 + self.elicit_retries;
        for attempt in 1..=attempts {
            let body = self
                .elicitor
                .complete_one(&messages)
                .map_err(|source| EngineError::Client { model: self.elicitor.name.clone(), source })?;
            let draft = Draft::new(history.len() as u8 + 1, body, schema, &self.elicitor.name);
            if !engine.passes_syntax(&draft)? {
                continue;
            }
            let assessed = engine.assess(&draft, instruction)?;
            if assessed.verdict.correct {
                return Ok(Ok((assessed, attempt)));
            }
        }
        Ok(Err(ElicitFailure::NotCorrect { attempts }))
    }

    /// First syntactically valid, incorrect action from one pool model.
    pub fn sample_incorrect<R: Rng + ?Sized>(
        &self,
        engine: &Engine,
        instruction: &Instruction,
        history: &[ContextTurn],
        rng: &mut R,
    ) -> Result<Option<Assessed>, EngineError> {
        let client = self.pool.pick(rng);
        let schemas = self.schemas(rng);
        let drafts = engine.sample_actions(instruction, history, client, &schemas)?;
        for draft in &drafts {
            if !engine.passes_syntax(draft)? {
                continue;
            }
            let assessed = engine.assess(draft, instruction)?;
            if !assessed.verdict.correct {
                return Ok(Some(assessed));
            }
        }
        Ok(None)
    }

    /// One extra instruction-level pair per reference solution, for problems
    /// that needed grounded elicitation and carry several references.
    pub fn extra_pairs_for_hard<R: Rng + ?Sized>(
        &self,
        engine: &Engine,
        instruction: &Instruction,
        rng: &mut R,
    ) -> Result<Vec<ActionPair>, EngineError> {
        let solutions = &instruction.ground_truth.solutions;
        if solutions.len() < 2 {
            return Ok(Vec::new());
        }
        let mut pairs = Vec::new();
        for solution in solutions {
            let chosen = match self.elicit_from_solution(engine, instruction, &[], solution)? {
                Ok((assessed, _)) => assessed,
                Err(_) => continue,
            };
            let Some(rejected) = self.sample_incorrect(engine, instruction, &[], rng)? else { continue };
            let chosen = chosen.into_node(&instruction.id, None);
            let rejected = rejected.into_node(&instruction.id, None);
            if pairs.iter().any(|p: &ActionPair| p.chosen.id == chosen.id) {
                continue;
            }
            pairs.push(ActionPair {
                instruction_id: instruction.id.clone(),
                context: Vec::new(),
                chosen,
                rejected,
                origin: PairOrigin::Additional,
            });
        }
        Ok(pairs)
    }
}
