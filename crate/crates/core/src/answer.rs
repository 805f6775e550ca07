//! Final-answer extraction, numeric comparison and program-output normalization.

use std::sync::OnceLock;

use regex::Regex;

use crate::tree::StepMarker;

/// Absolute and relative tolerance for numeric answers.
pub const ANSWER_TOLERANCE: f64 = 1e-6;

/// A number found in free text, with its byte span.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericToken {
    pub start: usize,
    pub end: usize,
    pub value: f64,
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"\\d?frac\{(-?\d+(?:\.\d+)?)\}\{(-?\d+(?:\.\d+)?)\}|(\d{1,3}(?:,\d{3})+|\d+)(\.\d+)?(?:/(\d+(?:\.\d+)?))?",
        )
        .expect("number regex")
    })
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Every number in `text` that is not glued to a preceding word character.
///
/// A leading `-` is folded in when it reads as a unary sign. Decimal commas
/// are accepted only as thousands separators (`1,234`).
pub fn numeric_tokens(text: &str) -> Vec<NumericToken> {
    let mut out = Vec::new();
    for caps in number_regex().captures_iter(text) {
        let whole = caps.get(0).expect("group 0");
        let mut start = whole.start();
        let before = text[..start].chars().next_back();
        if before.is_some_and(|c| is_word_char(c) || c == '.') {
            continue;
        }
        let value = if let (Some(num), Some(den)) = (caps.get(1), caps.get(2)) {
            let (n, d): (f64, f64) = match (num.as_str().parse(), den.as_str().parse()) {
                (Ok(n), Ok(d)) => (n, d),
                _ => continue,
            };
            n / d
        } else {
            let int: String = caps[3].chars().filter(|c| *c != ',').collect();
            let frac = caps.get(4).map_or("", |m| m.as_str());
            let Ok(mut v) = format!("{int}{frac}").parse::<f64>() else { continue };
            if let Some(den) = caps.get(5) {
                match den.as_str().parse::<f64>() {
                    Ok(d) if d != 0.0 => v /= d,
                    _ => continue,
                }
            }
            v
        };
        let mut value = value;
        if before == Some('-') {
            let prev = text[..start - 1].chars().next_back();
            if !prev.is_some_and(|c| is_word_char(c) || c == ')') {
                start -= 1;
                value = -value;
            }
        }
        out.push(NumericToken { start, end: whole.end(), value });
    }
    out
}

/// Parses a whole string as one number (`"7/2"`, `"-1,000"`, `"3.50"`).
pub fn parse_number(text: &str) -> Option<f64> {
    let trimmed = text.trim().trim_end_matches('.').trim_start_matches('$').trim();
    let tokens = numeric_tokens(trimmed);
    match tokens.as_slice() {
        [t] if t.start == 0 && t.end == trimmed.len() => Some(t.value),
        _ => None,
    }
}

/// `|a - b| <= max(tol, tol * |b|)` where `b` is the reference.
pub fn numbers_equal(predicted: f64, gold: f64) -> bool {
    (predicted - gold).abs() <= ANSWER_TOLERANCE.max(ANSWER_TOLERANCE * gold.abs())
}

/// Lowercased alphanumeric words, used for non-numeric answers.
pub fn normalize_text_answer(text: &str) -> String {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical key for grouping answers in majority voting.
pub fn canonical_answer(text: &str) -> String {
    match parse_number(text) {
        Some(v) => {
            let rounded = (v * 1e6).round() / 1e6;
            if rounded == 0.0 { "0".to_string() } else { format!("{rounded}") }
        }
        None => normalize_text_answer(text),
    }
}

fn answer_span(region: &str) -> &str {
    let lower = region.to_lowercase();
    let cues = ["answer is", "answer:"];
    let hit = cues
        .iter()
        .filter_map(|cue| lower.rfind(cue).map(|i| i + cue.len()))
        .max();
    if let Some(pos) = hit {
        // `to_lowercase` can change byte lengths; fall back to the last line if so
        if lower.len() == region.len() && region.is_char_boundary(pos) {
            let rest = &region[pos..];
            return rest.lines().next().unwrap_or("").trim();
        }
    }
    region.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerCheck {
    pub predicted: Option<String>,
    pub correct: bool,
}

/// Compares the final answer in `candidate` against `gold`.
///
/// Numeric gold answers take the last number after the final step mark.
/// Textual gold answers take the span after the last "answer is" cue (or the
/// last line) and compare normalized words.
pub fn check_answer(candidate: &str, gold: &str, marker: &StepMarker) -> AnswerCheck {
    let region = marker.final_step(candidate);
    if candidate.trim() == gold.trim() {
        return AnswerCheck { predicted: Some(gold.trim().to_string()), correct: true };
    }
    if let Some(gold_value) = parse_number(gold) {
        let found = match numeric_tokens(region).pop() {
            Some(t) => Some((region, t)),
            None => numeric_tokens(candidate).pop().map(|t| (candidate, t)),
        };
        return match found {
            Some((source, t)) => {
                let text = &source[t.start..t.end];
                AnswerCheck {
                    predicted: Some(text.to_string()),
                    correct: text.trim() == gold.trim() || numbers_equal(t.value, gold_value),
                }
            }
            None => AnswerCheck { predicted: None, correct: false },
        };
    }
    let span = answer_span(region);
    let predicted = normalize_text_answer(span);
    let gold_norm = normalize_text_answer(gold);
    let correct = !gold_norm.is_empty()
        && (predicted == gold_norm || contains_words(&predicted, &gold_norm));
    AnswerCheck { predicted: Some(span.to_string()), correct }
}

fn contains_words(haystack: &str, needle: &str) -> bool {
    let hay: Vec<&str> = haystack.split(' ').collect();
    let pat: Vec<&str> = needle.split(' ').collect();
    pat.len() <= hay.len() && hay.windows(pat.len()).any(|w| w == pat.as_slice())
}

/// Program output as compared by the judge: trailing whitespace stripped per
/// line, trailing blank lines dropped.
pub fn normalize_output(output: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = output.lines().map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines
}

pub fn outputs_match(actual: &str, expected: &str) -> bool {
    normalize_output(actual) == normalize_output(expected)
}
