//! Train/test overlap detection.
//!
//! Two detectors: word n-gram exact matching against same-task test sets
//! (fingerprints are 128-bit hashes, every hit is verified against the raw
//! tokens), and maximal common byte substrings against a held-out code corpus.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::{xxh3_128, xxh3_64};

use crate::tree::{Instruction, Task};

pub const DEFAULT_NGRAM: usize = 8;
pub const DEFAULT_MIN_SUBSTRING: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub doc_id: String,
    pub tokens: Vec<String>,
}

/// Lowercased runs of alphanumeric characters; punctuation and whitespace
/// separate tokens and are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Pluggable tokenizer; verdicts depend on it.
pub type Tokenizer = fn(&str) -> Vec<String>;

pub fn token_seq(doc_id: impl Into<String>, text: &str, tokenizer: Tokenizer) -> TokenSeq {
    TokenSeq { doc_id: doc_id.into(), tokens: tokenizer(text) }
}

fn token_hashes(tokens: &[String]) -> Vec<u64> {
    tokens.iter().map(|t| xxh3_64(t.as_bytes())).collect()
}

fn window_fingerprint(hashes: &[u64]) -> u128 {
    let mut bytes = Vec::with_capacity(hashes.len() * 8);
    for h in hashes {
        bytes.extend_from_slice(&h.to_le_bytes());
    }
    xxh3_128(&bytes)
}

/// Fingerprints of every length-`n` token window of a set of documents.
#[derive(Debug, Clone)]
pub struct NgramIndex {
    pub n: usize,
    docs: Vec<TokenSeq>,
    postings: HashMap<u128, Vec<(u32, u32)>>,
    windows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub kind: MatchKind,
    pub test_doc: String,
    pub train_off: usize,
    pub test_off: usize,
    /// Tokens for n-gram matches, bytes for substring matches.
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Ngram,
    Substring,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchReport {
    pub id: String,
    pub contaminated: bool,
    pub matches: Vec<Match>,
}

impl NgramIndex {
    /// Indexes `docs` in parallel; the merge keeps document order so the
    /// postings are deterministic.
    pub fn build(docs: Vec<TokenSeq>, n: usize) -> Self {
        assert!(n >= 1, "n-gram length must be positive");
        let per_doc: Vec<Vec<u128>> = docs
            .par_iter()
            .map(|doc| {
                if doc.tokens.len() < n {
                    return Vec::new();
                }
                let hashes = token_hashes(&doc.tokens);
                hashes.windows(n).map(window_fingerprint).collect()
            })
            .collect();
        let mut postings: HashMap<u128, Vec<(u32, u32)>> = HashMap::new();
        let mut windows = 0;
        for (doc_idx, fps) in per_doc.into_iter().enumerate() {
            windows += fps.len();
            for (off, fp) in fps.into_iter().enumerate() {
                postings.entry(fp).or_default().push((doc_idx as u32, off as u32));
            }
        }
        NgramIndex { n, docs, postings, windows }
    }

    /// Windows indexed before deduplication.
    pub fn window_count(&self) -> usize {
        self.windows
    }

    pub fn fingerprint_count(&self) -> usize {
        self.postings.len()
    }

    pub fn docs(&self) -> &[TokenSeq] {
        &self.docs
    }

    /// Verified window hits as `(doc index, train offset, test offset)`.
    fn window_hits(&self, tokens: &[String]) -> Vec<(usize, usize, usize)> {
        if tokens.len() < self.n {
            return Vec::new();
        }
        let hashes = token_hashes(tokens);
        let mut hits = Vec::new();
        for (train_off, window) in hashes.windows(self.n).enumerate() {
            let Some(post) = self.postings.get(&window_fingerprint(window)) else { continue };
            for &(doc, test_off) in post {
                let (doc, test_off) = (doc as usize, test_off as usize);
                let test = &self.docs[doc].tokens[test_off..test_off + self.n];
                if test == &tokens[train_off..train_off + self.n] {
                    hits.push((doc, train_off, test_off));
                }
            }
        }
        hits
    }

    /// Checks an instruction's tokens; adjacent window hits on the same
    /// diagonal are merged into one match.
    pub fn check_tokens(&self, id: &str, tokens: &[String]) -> MatchReport {
        let mut hits = self.window_hits(tokens);
        hits.sort_unstable_by_key(|&(doc, train, test)| (doc, train as isize - test as isize, train));
        let mut matches: Vec<Match> = Vec::new();
        let mut last: Option<(usize, usize, usize)> = None;
        for (doc, train, test) in hits {
            if let (Some((ld, lt, ls)), Some(m)) = (last, matches.last_mut()) {
                if ld == doc && train == lt + 1 && test == ls + 1 {
                    m.len += 1;
                    last = Some((doc, train, test));
                    continue;
                }
            }
            matches.push(Match {
                kind: MatchKind::Ngram,
                test_doc: self.docs[doc].doc_id.clone(),
                train_off: train,
                test_off: test,
                len: self.n,
            });
            last = Some((doc, train, test));
        }
        matches.sort_by(|a, b| (a.train_off, &a.test_doc, a.test_off).cmp(&(b.train_off, &b.test_doc, b.test_off)));
        MatchReport { id: id.to_string(), contaminated: !matches.is_empty(), matches }
    }
}

pub fn build_index(test_docs: &[(String, String)], n: usize, tokenizer: Tokenizer) -> NgramIndex {
    let docs = test_docs.iter().map(|(id, text)| token_seq(id.clone(), text, tokenizer)).collect();
    NgramIndex::build(docs, n)
}

pub fn check(id: &str, instruction_text: &str, index: &NgramIndex, tokenizer: Tokenizer) -> MatchReport {
    index.check_tokens(id, &tokenizer(instruction_text))
}

const RK_BASE: u64 = 1_099_511_628_211;

/// Rabin–Karp hashes (wrapping arithmetic) of every `len`-byte window.
fn rolling_hashes(data: &[u8], len: usize) -> Vec<u64> {
    if data.len() < len || len == 0 {
        return Vec::new();
    }
    let mut top = 1u64;
    for _ in 1..len {
        top = top.wrapping_mul(RK_BASE);
    }
    let mut h = 0u64;
    for &b in &data[..len] {
        h = h.wrapping_mul(RK_BASE).wrapping_add(u64::from(b) + 1);
    }
    let mut out = Vec::with_capacity(data.len() - len + 1);
    out.push(h);
    for i in len..data.len() {
        h = h.wrapping_sub((u64::from(data[i - len]) + 1).wrapping_mul(top));
        h = h.wrapping_mul(RK_BASE).wrapping_add(u64::from(data[i]) + 1);
        out.push(h);
    }
    out
}

/// Every maximal common byte substring of length `>= min_len` between
/// `train` and each test document, as `(test doc, train off, test off, len)`.
///
/// A hit on a `min_len` window is reported only where the common run starts
/// (the bytes before it differ or an edge is reached), then extended right.
pub fn substring_match(train: &[u8], test_corpus: &[(String, Vec<u8>)], min_len: usize) -> Vec<Match> {
    assert!(min_len >= 1, "min_len must be positive");
    let train_hashes = rolling_hashes(train, min_len);
    let mut out = Vec::new();
    for (doc_id, test) in test_corpus {
        let mut table: HashMap<u64, Vec<usize>> = HashMap::new();
        for (off, h) in rolling_hashes(test, min_len).into_iter().enumerate() {
            table.entry(h).or_default().push(off);
        }
        for (i, h) in train_hashes.iter().enumerate() {
            let Some(offsets) = table.get(h) else { continue };
            for &j in offsets {
                if i > 0 && j > 0 && train[i - 1] == test[j - 1] {
                    continue;
                }
                if train[i..i + min_len] != test[j..j + min_len] {
                    continue;
                }
                let mut len = min_len;
                while i + len < train.len() && j + len < test.len() && train[i + len] == test[j + len] {
                    len += 1;
                }
                out.push(Match { kind: MatchKind::Substring, test_doc: doc_id.clone(), train_off: i, test_off: j, len });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecontamConfig {
    pub n: usize,
    pub min_substring: usize,
}

impl Default for DecontamConfig {
    fn default() -> Self {
        DecontamConfig { n: DEFAULT_NGRAM, min_substring: DEFAULT_MIN_SUBSTRING }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Instruction>,
    pub removed: Vec<Instruction>,
    pub reports: Vec<MatchReport>,
}

/// Checks each instruction against the test sets of its own task, and coding
/// instructions additionally against `held_out_code` by substring matching.
pub fn filter_corpus(
    instructions: Vec<Instruction>,
    test_sets: &BTreeMap<Task, Vec<(String, String)>>,
    held_out_code: &[(String, String)],
    cfg: &DecontamConfig,
    tokenizer: Tokenizer,
) -> FilterOutcome {
    let indexes: BTreeMap<Task, NgramIndex> =
        test_sets.iter().map(|(task, docs)| (*task, build_index(docs, cfg.n, tokenizer))).collect();
    let code_corpus: Vec<(String, Vec<u8>)> =
        held_out_code.iter().map(|(id, text)| (id.clone(), text.as_bytes().to_vec())).collect();

    let reports: Vec<MatchReport> = instructions
        .par_iter()
        .map(|inst| {
            let mut report = match indexes.get(&inst.task) {
                Some(index) => check(&inst.id, &inst.prompt, index, tokenizer),
                None => {
                    log::warn!("{}: no test sets registered for task {}", inst.id, inst.task);
                    MatchReport { id: inst.id.clone(), contaminated: false, matches: Vec::new() }
                }
            };
            if inst.task == Task::Coding && !code_corpus.is_empty() {
                let subs = substring_match(inst.prompt.as_bytes(), &code_corpus, cfg.min_substring);
                report.contaminated |= !subs.is_empty();
                report.matches.extend(subs);
            }
            report
        })
        .collect();

    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (inst, report) in instructions.into_iter().zip(&reports) {
        if report.contaminated {
            removed.push(inst);
        } else {
            kept.push(inst);
        }
    }
    FilterOutcome { kept, removed, reports }
}
