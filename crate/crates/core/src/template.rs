//! Versioned prompt templates with `{slot}` placeholders.

use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template {template}: no value for slot {{{slot}}}")]
    MissingSlot { template: String, slot: String },
    #[error("template {0} not found")]
    Unknown(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub text: String,
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Template { name: name.into(), text: text.into() }
    }

    /// Slot names in order of first appearance.
    pub fn slots(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for (_, name, _) in placeholders(&self.text) {
            if !seen.contains(&name) {
                seen.push(name);
            }
        }
        seen
    }

    /// Substitutes every placeholder in one pass; values are not re-scanned.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut last = 0;
        for (start, name, end) in placeholders(&self.text) {
            let value = values.iter().find(|(k, _)| *k == name).map(|(_, v)| *v).ok_or_else(|| {
                TemplateError::MissingSlot { template: self.name.clone(), slot: name.to_string() }
            })?;
            out.push_str(&self.text[last..start]);
            out.push_str(value);
            last = end;
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

/// `(start, name, end)` for each `{identifier}` in `text`.
fn placeholders(text: &str) -> Vec<(usize, &str, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let rest = &bytes[i + 1..];
            let len = rest.iter().take_while(|b| b.is_ascii_lowercase() || **b == b'_').count();
            if len > 0 && rest.get(len) == Some(&b'}') {
                out.push((i, &text[i + 1..i + 1 + len], i + len + 2));
                i += len + 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

const BUILTIN_V1: &[(&str, &str)] = &[
    ("actor_cot", include_str!("../templates/v1/actor_cot.txt")),
    ("actor_modular", include_str!("../templates/v1/actor_modular.txt")),
    ("feedback", include_str!("../templates/v1/feedback.txt")),
    ("critique", include_str!("../templates/v1/critique.txt")),
    ("elicit_code", include_str!("../templates/v1/elicit_code.txt")),
    ("elicit_math_text", include_str!("../templates/v1/elicit_math_text.txt")),
    ("rationale_to_code", include_str!("../templates/v1/rationale_to_code.txt")),
    ("elicit_math_tool", include_str!("../templates/v1/elicit_math_tool.txt")),
    ("elicit_math_modular", include_str!("../templates/v1/elicit_math_modular.txt")),
    ("testgen", include_str!("../templates/v1/testgen.txt")),
    ("judge", include_str!("../templates/v1/judge.txt")),
];

/// Named templates of one version.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub version: String,
    templates: HashMap<String, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN_V1
            .iter()
            .map(|(name, text)| (name.to_string(), Template::new(*name, *text)))
            .collect();
        TemplateSet { version: "v1".into(), templates }
    }

    /// Built-in set with any `<name>.txt` found in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        set.version = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        for (name, _) in BUILTIN_V1 {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|source| TemplateError::Io { path: path.display().to_string(), source })?;
                set.templates.insert(name.to_string(), Template::new(*name, text));
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&Template, TemplateError> {
        self.templates.get(name).ok_or_else(|| TemplateError::Unknown(name.to_string()))
    }

    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        self.get(name)?.render(values)
    }
}
