//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use preftree::client::ModelClient;
use preftree::engine::{Engine, EngineSettings};
use preftree::pairs::AugmentConfig;
use preftree::rng::keyed_rng;
use preftree::sampling::{IncorrectPool, ModelTierList, Sampler};
use preftree::testkit::{fixed_critic, MockActor, ToySandbox};
use preftree::tree::{
    ActionNode, ActionPair, ContentKind, Critique, GroundTruth, Instruction, Observation, PairOrigin, PreferenceTree,
    ReasoningSchema, Task,
};

pub fn instruction(id: &str, answer: &str) -> Instruction {
    Instruction {
        id: id.to_string(),
        dataset: "GSM8K".into(),
        task: Task::Math,
        tool_mode: false,
        prompt: format!("Problem {id}: how many apples remain?"),
        ground_truth: GroundTruth { answer: Some(answer.into()), ..Default::default() },
        metadata: BTreeMap::new(),
    }
}

// ---------------------------------------------------------------- trees

fn random_node(rng: &mut ChaCha8Rng, id: String, parent: Option<&str>, turn: u8, correct: bool) -> ActionNode {
    let observation = rng.gen_bool(0.6).then(|| Observation {
        exec_output: rng.gen_bool(0.5).then(|| format!("{}", rng.gen_range(0..100))),
        traceback: rng.gen_bool(0.2).then(|| "Traceback: ValueError".to_string()),
        binary_feedback: correct,
        timed_out: rng.gen_bool(0.05),
    });
    let critique = (!correct && observation.is_some() && rng.gen_bool(0.7))
        .then(|| Critique { text: format!("check step {}", rng.gen_range(1..4)), author: "critic".into() });
    let kinds = [ContentKind::Text, ContentKind::Code, ContentKind::Mixed];
    ActionNode {
        body: format!("Step 1: {} \"quoted\" ünïcode\nStep 2: {}", id, rng.gen_range(0..1000)),
        id,
        parent_id: parent.map(str::to_string),
        turn,
        content_kind: kinds[rng.gen_range(0..3)],
        schema: if rng.gen_bool(0.5) { ReasoningSchema::ChainOfThought } else { ReasoningSchema::ModularProgramming },
        producer: format!("model-{}", rng.gen_range(0..3)),
        correct,
        observation,
        critique,
    }
}

fn fresh_id(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let id = format!("{:04x}", rng.gen::<u16>());
        if used.insert(id.clone()) {
            return id;
        }
    }
}

/// A valid tree of depth at most `max_depth`, shaped like real expansions:
/// each expanded incorrect node gets 0-2 correct and 0-2 incorrect children.
pub fn random_tree(rng: &mut ChaCha8Rng, idx: usize) -> PreferenceTree {
    let mut inst = instruction(&format!("inst-{idx}"), "5");
    inst.metadata.insert("k".into(), format!("{}", rng.gen_range(0..10)));
    let max_depth = if rng.gen_bool(0.8) { 5 } else { rng.gen_range(1..=5) };
    let mut tree = PreferenceTree::new(inst).with_max_depth(max_depth);
    let mut used = HashSet::new();
    let mut frontier: Vec<(Option<String>, u8)> = vec![(None, 1)];
    while let Some((parent, turn)) = frontier.pop() {
        if turn > max_depth {
            continue;
        }
        let n_correct = rng.gen_range(0..=2);
        let n_incorrect = rng.gen_range(0..=2);
        for _ in 0..n_correct {
            let id = fresh_id(rng, &mut used);
            tree.insert(random_node(rng, id, parent.as_deref(), turn, true));
        }
        for k in 0..n_incorrect {
            let id = fresh_id(rng, &mut used);
            tree.insert(random_node(rng, id.clone(), parent.as_deref(), turn, false));
            let p = if k == 0 { 0.85 } else { 0.25 };
            if rng.gen_bool(p) {
                frontier.push((Some(id), turn + 1));
            }
        }
    }
    if rng.gen_bool(0.1) {
        let mut c = random_node(rng, "extra-c".into(), None, 1, true);
        c.critique = None;
        let r = random_node(rng, "extra-r".into(), None, 1, false);
        tree.additional_pairs.push(ActionPair {
            instruction_id: tree.instruction.id.clone(),
            context: Vec::new(),
            chosen: c,
            rejected: r,
            origin: PairOrigin::Additional,
        });
    }
    tree
}

/// Applies one random structural corruption (or none).
pub fn mutate(rng: &mut ChaCha8Rng, mut tree: PreferenceTree) -> PreferenceTree {
    let ids: Vec<String> = tree.nodes.keys().cloned().collect();
    let pick = |rng: &mut ChaCha8Rng| ids[rng.gen_range(0..ids.len())].clone();
    match rng.gen_range(0..11) {
        0 if !ids.is_empty() => {
            let id = pick(rng);
            let n = tree.nodes.get_mut(&id).unwrap();
            n.correct = !n.correct;
        }
        1 if !ids.is_empty() => {
            let id = pick(rng);
            tree.nodes.get_mut(&id).unwrap().turn = rng.gen_range(0..8);
        }
        2 if ids.len() >= 2 => {
            let (a, b) = (pick(rng), pick(rng));
            tree.nodes.get_mut(&a).unwrap().parent_id = Some(b);
        }
        3 if !ids.is_empty() => {
            let id = pick(rng);
            tree.nodes.get_mut(&id).unwrap().parent_id = None;
        }
        4 if !ids.is_empty() => {
            let id = pick(rng);
            tree.nodes.get_mut(&id).unwrap().parent_id = Some("ghost".into());
        }
        5 if !ids.is_empty() => {
            let id = pick(rng);
            let n = tree.nodes.get_mut(&id).unwrap();
            n.observation = None;
            n.critique = Some(Critique { text: "x".into(), author: "c".into() });
        }
        6 => tree.max_depth = rng.gen_range(0..8),
        7 => {
            // chain of six turns
            let mut parent: Option<String> = None;
            for t in 1..=6u8 {
                let id = format!("deep{t}");
                let node = random_node(rng, id.clone(), parent.as_deref(), t, false);
                tree.insert(node);
                parent = Some(id);
            }
        }
        8 if !ids.is_empty() => {
            let id = pick(rng);
            let node = tree.nodes.remove(&id).unwrap();
            tree.nodes.insert(format!("{id}x"), node);
        }
        9 => tree.instruction.prompt = "  ".into(),
        10 if !tree.additional_pairs.is_empty() => tree.additional_pairs[0].chosen.correct = false,
        _ => {}
    }
    tree
}

/// Re-derives every structural rule from first principles.
pub fn brute_valid(tree: &PreferenceTree) -> bool {
    if tree.instruction.prompt.trim().is_empty() || !(1..=5).contains(&tree.max_depth) {
        return false;
    }
    for (key, node) in &tree.nodes {
        if key != &node.id {
            return false;
        }
        if node.critique.is_some() && node.observation.is_none() {
            return false;
        }
        // climb to the root, counting hops
        let mut seen = HashSet::new();
        let mut cur = node;
        let mut hops: u32 = 1;
        while let Some(p) = &cur.parent_id {
            if !seen.insert(cur.id.clone()) {
                return false;
            }
            let Some(parent) = tree.nodes.get(p) else { return false };
            if parent.correct {
                return false;
            }
            cur = parent;
            hops += 1;
            if hops > 64 {
                return false;
            }
        }
        if cur.turn != 1 || u32::from(node.turn) != hops || node.turn > tree.max_depth {
            return false;
        }
    }
    tree.additional_pairs
        .iter()
        .all(|p| p.origin == PairOrigin::Additional && p.chosen.correct && !p.rejected.correct)
}

/// All root-to-leaf paths by recursive enumeration over sorted children.
pub fn brute_paths(tree: &PreferenceTree) -> Vec<Vec<String>> {
    fn walk(tree: &PreferenceTree, parent: Option<&str>, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
        let mut kids: Vec<&String> =
            tree.nodes.values().filter(|n| n.parent_id.as_deref() == parent).map(|n| &n.id).collect();
        kids.sort();
        if kids.is_empty() {
            if !prefix.is_empty() {
                out.push(prefix.clone());
            }
            return;
        }
        for k in kids {
            prefix.push(k.clone());
            walk(tree, Some(k), prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    walk(tree, None, &mut Vec::new(), &mut out);
    out
}

// ---------------------------------------------------------------- augmentation

/// Reference augmentation: rebuilds the candidate list from the raw node
/// map, then replays the seeded draws over a used-mask (the k-th draw picks
/// the k-th still-unused candidate).
pub fn augment_oracle(tree: &PreferenceTree, cfg: &AugmentConfig) -> Vec<(String, String)> {
    let mut chain: Vec<&ActionNode> = Vec::new();
    let mut parent: Option<String> = None;
    loop {
        let next = tree
            .nodes
            .values()
            .filter(|n| n.parent_id == parent && !n.correct)
            .min_by(|a, b| a.id.cmp(&b.id));
        match next {
            Some(n) => {
                parent = Some(n.id.clone());
                chain.push(n);
            }
            None => break,
        }
    }
    let chain_ids: HashSet<&str> = chain.iter().map(|n| n.id.as_str()).collect();
    let mut correct: Vec<&ActionNode> = tree
        .nodes
        .values()
        .filter(|n| n.correct && n.parent_id.as_deref().is_none_or(|p| chain_ids.contains(p)))
        .collect();
    correct.sort_by_key(|n| (n.turn, n.id.clone()));
    if correct.len() * chain.len() > cfg.product_cap {
        return Vec::new();
    }
    let mut cands = Vec::new();
    for c in &correct {
        for i in &chain {
            if c.turn != i.turn {
                cands.push((c.id.clone(), i.id.clone()));
            }
        }
    }
    let mut used = vec![false; cands.len()];
    let mut left = cands.len();
    let mut rng = keyed_rng(cfg.seed, &tree.instruction.id);
    let mut occ: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    let mut draws = 0;
    while out.len() < cfg.max_pairs && left > 0 && draws < 10 * cfg.max_pairs {
        let k = rng.gen_range(0..left);
        let j = (0..cands.len()).filter(|&j| !used[j]).nth(k).unwrap();
        used[j] = true;
        left -= 1;
        draws += 1;
        let (c, i) = &cands[j];
        if occ.get(c).copied().unwrap_or(0) >= cfg.max_occurrence || occ.get(i).copied().unwrap_or(0) >= cfg.max_occurrence {
            continue;
        }
        *occ.entry(c.clone()).or_default() += 1;
        *occ.entry(i.clone()).or_default() += 1;
        out.push(cands[j].clone());
    }
    out
}

/// Constraint check on a sample, independent of how it was drawn.
pub fn augment_legal(tree: &PreferenceTree, pairs: &[(String, String)], cfg: &AugmentConfig) -> bool {
    let mut occ: HashMap<&str, usize> = HashMap::new();
    let mut distinct = HashSet::new();
    for (c, i) in pairs {
        let (Some(cn), Some(inn)) = (tree.node(c), tree.node(i)) else { return false };
        if !cn.correct || inn.correct || cn.turn == inn.turn || !distinct.insert((c, i)) {
            return false;
        }
        *occ.entry(c).or_default() += 1;
        *occ.entry(i).or_default() += 1;
    }
    pairs.len() <= cfg.max_pairs && occ.values().all(|&n| n <= cfg.max_occurrence)
}

// ---------------------------------------------------------------- decontamination

pub fn word(rng: &mut ChaCha8Rng) -> String {
    format!("w{}", rng.gen_range(0..200_000u32))
}

pub struct FuzzCorpus {
    pub test_docs: Vec<(String, String)>,
    pub train_docs: Vec<(String, String)>,
}

/// Random-word corpora with `planted` exact 8-gram overlaps and
/// `near_misses` copied 7-grams whose neighbours differ.
pub fn fuzz_corpus(seed: u64, total_tokens: usize, planted: usize, near_misses: usize) -> FuzzCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc_len = 200;
    let n_test = (total_tokens / 2) / doc_len;
    let n_train = (total_tokens / 2) / doc_len;
    let mut test: Vec<Vec<String>> = (0..n_test).map(|_| (0..doc_len).map(|_| word(&mut rng)).collect()).collect();
    let mut train: Vec<Vec<String>> = (0..n_train).map(|_| (0..doc_len).map(|_| word(&mut rng)).collect()).collect();
    let mut targets: Vec<usize> = (0..n_train).collect();
    for k in (1..targets.len()).rev() {
        targets.swap(k, rng.gen_range(0..=k));
    }
    // near misses first so their neighbour edits cannot break a planted copy
    let order = (planted..planted + near_misses).chain(0..planted);
    for k in order {
        let t = targets[k];
        let src = rng.gen_range(0..n_test);
        let len = if k < planted { 8 } else { 7 };
        let s_off = rng.gen_range(1..doc_len - len - 1);
        let t_off = rng.gen_range(1..doc_len - len - 1);
        let piece: Vec<String> = test[src][s_off..s_off + len].to_vec();
        train[t][t_off..t_off + len].clone_from_slice(&piece);
        if k >= planted {
            // make sure neither neighbour extends the 7-gram
            train[t][t_off - 1] = format!("x{k}a");
            train[t][t_off + len] = format!("x{k}b");
            test[src][s_off - 1] = format!("y{k}a");
            test[src][s_off + len] = format!("y{k}b");
        }
    }
    FuzzCorpus {
        test_docs: test.into_iter().enumerate().map(|(i, d)| (format!("test-{i}"), d.join(" "))).collect(),
        train_docs: train.into_iter().enumerate().map(|(i, d)| (format!("train-{i}"), d.join(" "))).collect(),
    }
}

/// Exact n-gram scan with full token comparison.
pub struct BruteNgram<'a> {
    n: usize,
    names: Vec<&'a str>,
    table: HashMap<&'a [String], Vec<(usize, usize)>>,
}

impl<'a> BruteNgram<'a> {
    pub fn new(test_docs: &'a [(String, Vec<String>)], n: usize) -> Self {
        let mut table: HashMap<&[String], Vec<(usize, usize)>> = HashMap::new();
        for (d, (_, toks)) in test_docs.iter().enumerate() {
            if toks.len() >= n {
                for off in 0..=toks.len() - n {
                    table.entry(&toks[off..off + n]).or_default().push((d, off));
                }
            }
        }
        BruteNgram { n, names: test_docs.iter().map(|(id, _)| id.as_str()).collect(), table }
    }

    /// Every `(test doc, train offset, test offset)` window hit, sorted.
    pub fn hits(&self, train: &[String]) -> Vec<(String, usize, usize)> {
        let n = self.n;
        let mut hits = Vec::new();
        if train.len() >= n {
            for off in 0..=train.len() - n {
                if let Some(post) = self.table.get(&train[off..off + n]) {
                    for &(d, t) in post {
                        hits.push((self.names[d].to_string(), off, t));
                    }
                }
            }
        }
        hits.sort();
        hits
    }
}

/// Maximal common substrings by dynamic programming over
/// `lcp[i][j] = train[i] == test[j] ? 1 + lcp[i+1][j+1] : 0`, two rows at a time.
pub fn dp_substrings(train: &[u8], test_docs: &[(String, Vec<u8>)], min_len: usize) -> Vec<(String, usize, usize, usize)> {
    let mut out = Vec::new();
    for (doc, test) in test_docs {
        let m = test.len();
        let mut next = vec![0u32; m + 1];
        let mut cur = vec![0u32; m + 1];
        for i in (0..train.len()).rev() {
            for j in (0..m).rev() {
                cur[j] = if train[i] == test[j] { 1 + next[j + 1] } else { 0 };
            }
            for j in 0..m {
                let starts = i == 0 || j == 0 || train[i - 1] != test[j - 1];
                if starts && cur[j] as usize >= min_len {
                    out.push((doc.clone(), i, j, cur[j] as usize));
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
    }
    out.sort();
    out
}

// ---------------------------------------------------------------- engine scenarios

pub fn engine(seed: u64) -> Engine {
    let settings = EngineSettings { seed, ..EngineSettings::default() };
    Engine::new(Arc::new(fixed_critic("critic")), Arc::new(ToySandbox), settings).unwrap()
}

pub fn sampler(tiers: Vec<MockActor>, pool: Vec<MockActor>, elicitor: MockActor) -> Sampler {
    let tiers = tiers.into_iter().enumerate().map(|(k, a)| Arc::new(a.into_client(&format!("tier{k}")))).collect();
    let pool = pool.into_iter().enumerate().map(|(k, a)| Arc::new(a.into_client(&format!("pool{k}")))).collect();
    Sampler::new(
        ModelTierList::new(tiers).unwrap(),
        IncorrectPool::new(pool).unwrap(),
        Arc::new(elicitor.into_client("elicitor")),
    )
}

/// Actor whose samples are correct exactly at the listed turns.
pub fn correct_at(turns: &'static [u8]) -> MockActor {
    MockActor::by_turn(move |t| turns.contains(&t))
}

pub fn client(actor: MockActor, name: &str) -> Arc<ModelClient> {
    Arc::new(actor.into_client(name))
}

/// Turn-by-turn shape: (turn, correct children, incorrect children) per expanded level.
pub fn shape(tree: &PreferenceTree) -> Vec<(u8, usize, usize)> {
    let mut out = Vec::new();
    let mut parent: Option<String> = None;
    loop {
        let kids: Vec<&ActionNode> = tree.nodes.values().filter(|n| n.parent_id == parent).collect();
        if kids.is_empty() {
            break;
        }
        let turn = kids[0].turn;
        let c = kids.iter().filter(|n| n.correct).count();
        let i = kids.iter().filter(|n| !n.correct).count();
        out.push((turn, c, i));
        match kids.iter().find(|n| !n.correct) {
            Some(n) => parent = Some(n.id.clone()),
            None => break,
        }
    }
    out
}

// ---------------------------------------------------------------- numerics

/// Central difference of a scalar function.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero derivatives.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Mode of a list by exhaustive counting; ties to the earliest first occurrence.
pub fn brute_mode(items: &[String]) -> Option<String> {
    let mut best: Option<(usize, usize)> = None; // (count, first index)
    for (i, a) in items.iter().enumerate() {
        if items[..i].contains(a) {
            continue;
        }
        let count = items.iter().filter(|b| *b == a).count();
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, i));
        }
    }
    best.map(|(_, i)| items[i].clone())
}
