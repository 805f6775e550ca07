//! Pipeline configuration: one TOML file, every field optional.
//!
//! Secrets never appear inline. An endpoint's `api_key` must name an
//! environment variable as `${NAME}`; nothing else is substituted.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use preftree::client::{ClientError, EndpointDescriptor, ModelClient, RetryPolicy, SamplingParams};
use preftree::engine::{Engine, EngineSettings};
use preftree::sampling::{IncorrectPool, LadderBudget, ModelTierList, Sampler};
use preftree::sandbox::{ExecLimits, Sandbox, StubSandbox, WorkerPool};
use preftree::template::TemplateSet;
use preftree::testkit::{echo_critic, fixed_critic, MockActor, MockStyle, ToySandbox};
use preftree::tree::StepMarker;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub endpoints: BTreeMap<String, EndpointConfig>,
    pub models: ModelRoles,
    pub sandbox: SandboxConfig,
    pub engine: EngineSection,
    pub ladder: LadderSection,
    pub augment: AugmentSection,
    pub decontam: DecontamSection,
    pub select: SelectSection,
    pub losslab: LosslabSection,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EndpointConfig {
    /// A chat-completion server.
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key: Option<String>,
        #[serde(default)]
        temperature: Option<f64>,
        #[serde(default)]
        top_p: Option<f64>,
        #[serde(default)]
        max_tokens: Option<u32>,
        #[serde(default)]
        timeout_secs: Option<u64>,
        #[serde(default)]
        max_attempts: Option<u32>,
        #[serde(default)]
        initial_backoff_ms: Option<u64>,
    },
    /// Deterministic in-process stand-in, for dry runs and tests.
    Mock {
        policy: MockPolicy,
        #[serde(default)]
        p: Option<f64>,
        #[serde(default)]
        turns: Vec<u8>,
        #[serde(default)]
        style: MockStyleName,
        #[serde(default)]
        broken_syntax: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockPolicy {
    Always,
    Never,
    Probability,
    /// Correct exactly at the listed turns.
    Turns,
    /// Critique model with canned feedback.
    Critic,
    /// Critique model replying with its own prompt.
    Echo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockStyleName {
    #[default]
    Text,
    EchoCode,
    AnswerCode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelRoles {
    /// Actor tiers, cheapest first.
    pub tiers: Vec<String>,
    /// Models supplying rejected actions.
    pub pool: Vec<String>,
    /// Defaults to the strongest tier.
    pub elicitor: Option<String>,
    pub critic: Option<String>,
    pub judge: Option<String>,
    pub probe: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SandboxKind {
    /// External worker processes speaking JSON over stdio.
    #[default]
    Process,
    /// Built-in toy interpreter.
    Toy,
    /// Accepts everything, prints nothing.
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub kind: SandboxKind,
    pub program: String,
    pub args: Vec<String>,
    pub pool_size: usize,
    pub timeout_ms: u64,
    pub memory_mb: u64,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        let limits = ExecLimits::default();
        SandboxConfig {
            kind: SandboxKind::default(),
            program: "python3".into(),
            args: vec!["-m".into(), "sandbox_runner".into()],
            pool_size: 4,
            timeout_ms: limits.timeout_ms,
            memory_mb: limits.memory_mb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub max_depth: u8,
    pub step_marker: String,
    pub templates_dir: Option<PathBuf>,
}

impl Default for EngineSection {
    fn default() -> Self {
        let s = EngineSettings::default();
        EngineSection { max_depth: s.max_depth, step_marker: s.step_marker.pattern, templates_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderSection {
    pub samples_per_round: u32,
    pub max_rounds: u32,
    pub elicit_retries: u32,
}

impl Default for LadderSection {
    fn default() -> Self {
        let b = LadderBudget::default();
        LadderSection { samples_per_round: b.samples_per_round, max_rounds: b.max_rounds, elicit_retries: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub product_cap: usize,
    pub max_pairs: usize,
    pub max_occurrence: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = preftree::pairs::AugmentConfig::default();
        AugmentSection { product_cap: a.product_cap, max_pairs: a.max_pairs, max_occurrence: a.max_occurrence }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecontamSection {
    pub n: usize,
    pub min_substring: usize,
}

impl Default for DecontamSection {
    fn default() -> Self {
        let d = preftree::decontam::DecontamConfig::default();
        DecontamSection { n: d.n, min_substring: d.min_substring }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub mathqa: bool,
    pub numglue: bool,
    pub tabmwp: bool,
    pub probe_attempts: u32,
    /// Dataset name for records that carry none.
    pub default_dataset: String,
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection { mathqa: true, numglue: true, tabmwp: true, probe_attempts: 1, default_dataset: "unknown".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LosslabSection {
    pub objective: String,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub lambda_ratio: f64,
    pub pairs: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub fd_points: usize,
}

impl Default for LosslabSection {
    fn default() -> Self {
        let t = preftree::TrainConfig64::default();
        LosslabSection {
            objective: "ultra".into(),
            steps: t.steps,
            learning_rate: t.learning_rate,
            beta: t.beta,
            lambda_ratio: t.lambda_ratio,
            pairs: 1000,
            dim: 4,
            separation: 4.0,
            noise: 0.5,
            fd_points: 1000,
        }
    }
}

/// Default file locations; command-line paths take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub instructions: Option<PathBuf>,
    pub selected: Option<PathBuf>,
    pub trees: Option<PathBuf>,
    pub audit: Option<PathBuf>,
    pub failures: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub test_sets: Option<PathBuf>,
    pub held_out_code: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        cfg.log_overrides();
        Ok(cfg)
    }

    /// Logs each value that differs from the built-in default.
    pub fn log_overrides(&self) {
        let mut ours = BTreeMap::new();
        let mut base = BTreeMap::new();
        if let (Ok(a), Ok(b)) = (toml::Value::try_from(self), toml::Value::try_from(Self::default())) {
            flatten("", &a, &mut ours);
            flatten("", &b, &mut base);
        }
        for (name, ep) in &self.endpoints {
            let kind = match ep {
                EndpointConfig::Http { model, .. } => format!("http model {model}"),
                EndpointConfig::Mock { policy, .. } => format!("mock {policy:?}").to_lowercase(),
            };
            log::info!("config: endpoint {name} ({kind})");
        }
        for (key, value) in ours.iter().filter(|(k, _)| !k.starts_with("endpoints.")) {
            match base.get(key) {
                Some(d) if d == value => {}
                Some(d) => log::info!("config override: {key} = {value} (default {d})"),
                None => log::info!("config override: {key} = {value}"),
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (name, ep) in &self.endpoints {
            match ep {
                EndpointConfig::Http { api_key: Some(key), .. } => {
                    secret_var(key).map_err(|m| CliError::Config(format!("endpoint {name}: {m}")))?;
                }
                EndpointConfig::Mock { policy: MockPolicy::Probability, p, .. }
                    if !p.is_some_and(|p| (0.0..=1.0).contains(&p)) =>
                {
                    return Err(CliError::Config(format!("endpoint {name}: probability policy needs p in [0, 1]")));
                }
                _ => {}
            }
        }
        let roles = &self.models;
        let named = roles.tiers.iter().chain(&roles.pool).chain(&roles.elicitor).chain(&roles.critic).chain(&roles.judge).chain(&roles.probe);
        for name in named {
            if !self.endpoints.contains_key(name) {
                return Err(CliError::Config(format!("model role refers to unknown endpoint {name:?}")));
            }
        }
        if self.ladder.samples_per_round == 0 || self.ladder.max_rounds == 0 {
            return Err(CliError::Config("ladder budget must be positive".into()));
        }
        if self.decontam.n == 0 || self.decontam.min_substring == 0 {
            return Err(CliError::Config("decontam lengths must be positive".into()));
        }
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be positive".into()));
        }
        Ok(())
    }

    pub fn augment(&self) -> preftree::pairs::AugmentConfig {
        preftree::pairs::AugmentConfig {
            product_cap: self.augment.product_cap,
            max_pairs: self.augment.max_pairs,
            max_occurrence: self.augment.max_occurrence,
            seed: self.seed,
        }
    }

    pub fn decontam(&self) -> preftree::decontam::DecontamConfig {
        preftree::decontam::DecontamConfig { n: self.decontam.n, min_substring: self.decontam.min_substring }
    }

    /// Worker count: the flag, then the config, then the machine, capped by
    /// the sandbox pool.
    pub fn jobs(&self, flag: Option<usize>) -> usize {
        let wanted = flag.or(self.jobs).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        match self.sandbox.kind {
            SandboxKind::Process => wanted.min(self.sandbox.pool_size.max(1)),
            _ => wanted,
        }
        .max(1)
    }

    /// Client for the named endpoint. Mock actors answer with `gold`.
    pub fn client(&self, name: &str, gold: &Arc<HashMap<String, String>>) -> Result<Arc<ModelClient>, CliError> {
        let ep = self.endpoints.get(name).ok_or_else(|| CliError::Config(format!("unknown endpoint {name:?}")))?;
        let client = match ep {
            EndpointConfig::Http {
                base_url,
                model,
                api_key,
                temperature,
                top_p,
                max_tokens,
                timeout_secs,
                max_attempts,
                initial_backoff_ms,
            } => {
                let auth_token_env = match api_key {
                    Some(k) => Some(secret_var(k).map_err(|m| CliError::Config(format!("endpoint {name}: {m}")))?),
                    None => None,
                };
                let descriptor = EndpointDescriptor { base_url: base_url.clone(), model: model.clone(), auth_token_env };
                let defaults = SamplingParams::default();
                let sampling = SamplingParams {
                    temperature: temperature.unwrap_or(defaults.temperature),
                    top_p: top_p.unwrap_or(defaults.top_p),
                    max_tokens: max_tokens.unwrap_or(defaults.max_tokens),
                };
                let retry_default = RetryPolicy::default();
                let retry = RetryPolicy {
                    max_attempts: max_attempts.unwrap_or(retry_default.max_attempts),
                    initial_backoff_ms: initial_backoff_ms.unwrap_or(retry_default.initial_backoff_ms),
                    ..retry_default
                };
                let timeout = Duration::from_secs(timeout_secs.unwrap_or(120));
                let mut c = ModelClient::http(&descriptor, timeout)
                    .map_err(|e: ClientError| CliError::Config(format!("endpoint {name}: {e}")))?
                    .with_sampling(sampling)
                    .with_retry(retry);
                c.name = name.to_string();
                c
            }
            EndpointConfig::Mock { policy, p, turns, style, broken_syntax } => {
                let actor = match policy {
                    MockPolicy::Always => MockActor::always(true),
                    MockPolicy::Never => MockActor::always(false),
                    MockPolicy::Probability => MockActor::with_probability(p.unwrap_or(0.5)),
                    MockPolicy::Turns => {
                        let turns = turns.clone();
                        MockActor::by_turn(move |t| turns.contains(&t))
                    }
                    MockPolicy::Critic => return Ok(Arc::new(fixed_critic(name))),
                    MockPolicy::Echo => return Ok(Arc::new(echo_critic(name))),
                };
                let style = match style {
                    MockStyleName::Text => MockStyle::Text,
                    MockStyleName::EchoCode => MockStyle::EchoCode,
                    MockStyleName::AnswerCode => MockStyle::AnswerCode,
                };
                actor.style(style).broken_syntax(*broken_syntax).answers(gold.clone()).into_client(name)
            }
        };
        Ok(Arc::new(client))
    }

    pub fn sandbox(&self) -> Arc<dyn Sandbox> {
        match self.sandbox.kind {
            SandboxKind::Process => {
                Arc::new(WorkerPool::new(self.sandbox.program.clone(), self.sandbox.args.clone(), self.sandbox.pool_size))
            }
            SandboxKind::Toy => Arc::new(ToySandbox),
            SandboxKind::Stub => Arc::new(StubSandbox::inert()),
        }
    }

    pub fn engine(&self, critic: Arc<ModelClient>, judge: Option<Arc<ModelClient>>) -> Result<Engine, CliError> {
        let settings = EngineSettings {
            exec_limits: ExecLimits { timeout_ms: self.sandbox.timeout_ms, memory_mb: self.sandbox.memory_mb },
            max_depth: self.engine.max_depth,
            seed: self.seed,
            step_marker: StepMarker::new(self.engine.step_marker.clone()),
        };
        let mut engine = Engine::new(critic, self.sandbox(), settings).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(dir) = &self.engine.templates_dir {
            let templates = TemplateSet::with_overrides(dir).map_err(|e| CliError::Config(e.to_string()))?;
            engine = engine.with_templates(templates);
        }
        if let Some(judge) = judge {
            engine = engine.with_judge(judge);
        }
        Ok(engine)
    }

    pub fn sampler(&self, gold: &Arc<HashMap<String, String>>) -> Result<Sampler, CliError> {
        let roles = &self.models;
        if roles.tiers.is_empty() || roles.pool.is_empty() {
            return Err(CliError::Config("models.tiers and models.pool must be set".into()));
        }
        let tiers = roles.tiers.iter().map(|n| self.client(n, gold)).collect::<Result<Vec<_>, _>>()?;
        let pool = roles.pool.iter().map(|n| self.client(n, gold)).collect::<Result<Vec<_>, _>>()?;
        let elicitor = match &roles.elicitor {
            Some(n) => self.client(n, gold)?,
            None => tiers.last().expect("non-empty tiers").clone(),
        };
        let mut sampler = Sampler::new(
            ModelTierList::new(tiers).map_err(|e| CliError::Config(e.to_string()))?,
            IncorrectPool::new(pool).map_err(|e| CliError::Config(e.to_string()))?,
            elicitor,
        )
        .with_budget(LadderBudget { samples_per_round: self.ladder.samples_per_round, max_rounds: self.ladder.max_rounds });
        sampler.elicit_retries = self.ladder.elicit_retries;
        Ok(sampler)
    }
}

/// `${NAME}` → `NAME`. Literal secrets are refused.
pub fn secret_var(value: &str) -> Result<String, String> {
    let name = value
        .strip_prefix("${")
        .and_then(|v| v.strip_suffix('}'))
        .ok_or_else(|| "api_key must reference an environment variable as ${NAME}".to_string())?;
    let valid = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !name.starts_with(|c: char| c.is_ascii_digit());
    if valid {
        Ok(name.to_string())
    } else {
        Err(format!("invalid environment variable name {name:?}"))
    }
}
