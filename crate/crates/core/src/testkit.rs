//! Deterministic stand-ins for model endpoints and the code sandbox.
//!
//! Used by the test suites and by the CLI's `mock` endpoint kind.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::answer::parse_number;
use crate::client::{ChatRequest, ModelClient};
use crate::sandbox::{ExecKind, ExecRequest, ExecResponse, Sandbox, SandboxError};

/// Turn a request belongs to: one plus the number of earlier assistant actions.
pub fn turn_of(request: &ChatRequest) -> u8 {
    1 + request.messages.iter().filter(|m| m.role == "assistant").count() as u8
}

/// A tiny line interpreter understanding just enough Python for tests.
///
/// * `print(input())` echoes stdin
/// * `print(x)` / `print("x")` prints `x`
/// * `raise Name(...)` or a `/0` division fails with a traceback
/// * `while True: pass` times out
///
/// Syntax checks fail on `(:` or unbalanced parentheses.
#[derive(Debug, Default)]
pub struct ToySandbox;

pub fn toy_syntax_ok(code: &str) -> bool {
    let mut depth = 0i64;
    for c in code.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return false;
        }
    }
    depth == 0 && !code.contains("(:")
}

fn traceback(line: usize, exc: &str) -> String {
    format!("Traceback (most recent call last):\n  File \"<string>\", line {line}, in <module>\n{exc}")
}

pub fn toy_run(code: &str, stdin: &str) -> ExecResponse {
    let mut out = ExecResponse::default();
    for (i, raw) in code.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with("while True") {
            out.timed_out = true;
            out.exit_status = -9;
            return out;
        }
        if let Some(rest) = line.strip_prefix("raise ") {
            let name = rest.split('(').next().unwrap_or(rest).trim();
            out.traceback = Some(traceback(i + 1, &format!("{name}: raised")));
            out.exit_status = 1;
            return out;
        }
        if line.replace(' ', "").contains("/0") {
            out.traceback = Some(traceback(i + 1, "ZeroDivisionError: division by zero"));
            out.exit_status = 1;
            return out;
        }
        if let Some(arg) = line.strip_prefix("print(").and_then(|r| r.strip_suffix(')')) {
            let text = if arg == "input()" {
                stdin.trim_end_matches('\n').to_string()
            } else {
                arg.trim_matches(|c| c == '"' || c == '\'').to_string()
            };
            out.stdout.push_str(&text);
            out.stdout.push('\n');
        }
    }
    out
}

impl Sandbox for ToySandbox {
    fn execute(&self, request: ExecRequest) -> Result<ExecResponse, SandboxError> {
        request.validate()?;
        let mut response = match request.kind {
            ExecKind::SyntaxCheck => ExecResponse { syntax_ok: Some(toy_syntax_ok(&request.code)), ..Default::default() },
            ExecKind::Run => toy_run(&request.code, &request.stdin),
        };
        response.id = request.id;
        Ok(response)
    }
}

/// Everything a mock policy may condition on.
#[derive(Debug, Clone, PartialEq)]
pub struct MockCall {
    pub turn: u8,
    /// Position within the request's `n` slots.
    pub slot: u32,
    /// How many times this exact request has been seen before.
    pub repeat: u64,
    /// Uniform in `[0, 1)`, a pure function of the request, `repeat` and `slot`.
    pub uniform: f64,
}

type Policy = dyn Fn(&MockCall) -> bool + Send + Sync;

/// Shape of the actions a mock produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockStyle {
    /// Step-marked prose ending in "The answer is ...".
    Text,
    /// A fenced program: `print(input())` when correct.
    EchoCode,
    /// A fenced program that prints the answer.
    AnswerCode,
}

/// Scripted actor whose correctness per sample is decided by a policy.
pub struct MockActor {
    policy: Box<Policy>,
    style: MockStyle,
    /// Gold answers keyed by instruction prompt.
    answers: Arc<HashMap<String, String>>,
    seen: Mutex<HashMap<String, u64>>,
    /// Emit code with a syntax error for incorrect samples.
    broken_syntax: bool,
}

impl MockActor {
    pub fn new<F>(policy: F) -> Self
    where
        F: Fn(&MockCall) -> bool + Send + Sync + 'static,
    {
        MockActor {
            policy: Box::new(policy),
            style: MockStyle::Text,
            answers: Arc::new(HashMap::new()),
            seen: Mutex::new(HashMap::new()),
            broken_syntax: false,
        }
    }

    pub fn always(correct: bool) -> Self {
        Self::new(move |_| correct)
    }

    /// Correct exactly at the turns for which `f` holds.
    pub fn by_turn<F>(f: F) -> Self
    where
        F: Fn(u8) -> bool + Send + Sync + 'static,
    {
        Self::new(move |c| f(c.turn))
    }

    /// Each sample independently correct with probability `p`.
    pub fn with_probability(p: f64) -> Self {
        Self::new(move |c| c.uniform < p)
    }

    pub fn style(mut self, style: MockStyle) -> Self {
        self.style = style;
        self
    }

    pub fn answers(mut self, answers: Arc<HashMap<String, String>>) -> Self {
        self.answers = answers;
        self
    }

    pub fn broken_syntax(mut self, yes: bool) -> Self {
        self.broken_syntax = yes;
        self
    }

    fn gold_for(&self, request: &ChatRequest) -> String {
        let mut best: Option<(&String, &String)> = None;
        for m in &request.messages {
            for (prompt, gold) in self.answers.iter() {
                if m.content.contains(prompt.as_str()) && best.is_none_or(|(p, _)| prompt.len() > p.len()) {
                    best = Some((prompt, gold));
                }
            }
        }
        best.map(|(_, g)| g.clone()).unwrap_or_else(|| "5".to_string())
    }

    fn render(&self, gold: &str, correct: bool, call: &MockCall) -> String {
        let tag = format!("t{} r{} s{}", call.turn, call.repeat, call.slot);
        let wrong = match parse_number(gold) {
            Some(v) => format!("{}", v + 1000.0 + call.slot as f64),
            None => "unknown".to_string(),
        };
        let answer = if correct { gold.to_string() } else { wrong };
        match self.style {
            MockStyle::Text => format!("Step 1: Work through the problem ({tag}).\nStep 2: The answer is {answer}"),
            MockStyle::EchoCode => {
                let body = if correct {
                    "print(input())".to_string()
                } else if self.broken_syntax {
                    "def f(:".to_string()
                } else {
                    format!("print(\"{tag}\")")
                };
                format!("Step 1: Read the input and answer ({tag}).\n```python\n{body}\n```")
            }
            MockStyle::AnswerCode => {
                let body = if !correct && self.broken_syntax { "def f(:".to_string() } else { format!("print({answer})") };
                format!("Step 1: Compute the value ({tag}).\n```python\n{body}\n```\nStep 2: The answer is {answer}")
            }
        }
    }

    fn respond(&self, request: &ChatRequest) -> Vec<String> {
        let key = hex(&Sha256::digest(serde_json::to_vec(&request.messages).unwrap_or_default()));
        let repeat = {
            let mut seen = self.seen.lock().expect("mock state");
            let n = seen.entry(key.clone()).or_insert(0);
            let r = *n;
            *n += 1;
            r
        };
        let gold = self.gold_for(request);
        let turn = turn_of(request);
        (0..request.n)
            .map(|slot| {
                let call = MockCall { turn, slot, repeat, uniform: uniform(&key, repeat, slot) };
                let correct = (self.policy)(&call);
                self.render(&gold, correct, &call)
            })
            .collect()
    }

    pub fn into_client(self, name: &str) -> ModelClient {
        ModelClient::scripted(name, move |req, _| Ok(self.respond(req)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn uniform(key: &str, repeat: u64, slot: u32) -> f64 {
    let digest = Sha256::new().chain_update(key).chain_update(repeat.to_le_bytes()).chain_update(slot.to_le_bytes()).finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}

/// Critique model returning a fixed piece of feedback.
pub fn fixed_critic(name: &str) -> ModelClient {
    ModelClient::scripted(name, |req, _| {
        Ok(vec!["Step 2 is wrong: recheck the final computation against the problem.".to_string(); req.n as usize])
    })
}

/// Critique model that answers with its own prompt.
pub fn echo_critic(name: &str) -> ModelClient {
    ModelClient::scripted(name, |req, _| {
        let text = req.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        Ok(vec![text; req.n as usize])
    })
}
