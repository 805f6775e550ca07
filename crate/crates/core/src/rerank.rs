//! Best-of-N selection: reward rerank, self-consistency, pass@N.

use std::collections::HashMap;

use crate::answer::canonical_answer;
use crate::scalar::Scalar;

/// Id of the highest-reward candidate; ties go to the lowest id. NaN rewards never win.
pub fn rerank<I: Ord + Clone, F: Scalar>(candidates: &[(I, F)]) -> Option<I> {
    let mut best: Option<&(I, F)> = None;
    for cand in candidates.iter().filter(|(_, r)| !r.is_nan()) {
        best = match best {
            None => Some(cand),
            Some(b) if cand.1 > b.1 || (cand.1 == b.1 && cand.0 < b.0) => Some(cand),
            keep => keep,
        };
    }
    best.or_else(|| candidates.iter().min_by(|a, b| a.0.cmp(&b.0))).map(|(id, _)| id.clone())
}

/// Index-keyed convenience wrapper over [`rerank`].
pub fn rerank_scores<F: Scalar>(rewards: &[F]) -> Option<usize> {
    let c: Vec<(usize, F)> = rewards.iter().copied().enumerate().collect();
    rerank(&c)
}

/// Most frequent answer after normalisation; ties go to the answer seen first.
/// Returns the first raw spelling of the winning group.
pub fn self_consistency<S: AsRef<str>>(answers: &[S]) -> Option<String> {
    let mut groups: Vec<(String, &str, usize)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for a in answers {
        let key = canonical_answer(a.as_ref());
        match index.get(&key) {
            Some(&g) => groups[g].2 += 1,
            None => {
                index.insert(key.clone(), groups.len());
                groups.push((key, a.as_ref(), 1));
            }
        }
    }
    let mut best: Option<&(String, &str, usize)> = None;
    for g in &groups {
        if best.is_none_or(|b| g.2 > b.2) {
            best = Some(g);
        }
    }
    best.map(|g| g.1.to_string())
}

/// True iff any of the first `n` candidates is correct.
pub fn pass_at_n(results: &[bool], n: usize) -> bool {
    results.iter().take(n).any(|r| *r)
}

/// Mean of [`pass_at_n`] over instructions.
pub fn pass_at_n_rate(pools: &[Vec<bool>], n: usize) -> f64 {
    if pools.is_empty() {
        return 0.0;
    }
    pools.iter().filter(|p| pass_at_n(p, n)).count() as f64 / pools.len() as f64
}

/// Fraction of pools whose reranked winner among the first `n` is correct.
pub fn rerank_accuracy<F: Scalar>(pools: &[Vec<(bool, F)>], n: usize) -> f64 {
    if pools.is_empty() {
        return 0.0;
    }
    let hits = pools
        .iter()
        .filter(|pool| {
            let head: Vec<(usize, F)> = pool.iter().take(n).map(|(_, r)| *r).enumerate().collect();
            rerank(&head).is_some_and(|i| pool[i].0)
        })
        .count();
    hits as f64 / pools.len() as f64
}

/// Fraction of pools whose majority answer among the first `n` matches `gold`.
pub fn self_consistency_accuracy<S: AsRef<str>>(pools: &[(Vec<S>, String)], n: usize) -> f64 {
    if pools.is_empty() {
        return 0.0;
    }
    let hits = pools
        .iter()
        .filter(|(answers, gold)| {
            let head: Vec<&str> = answers.iter().take(n).map(|a| a.as_ref()).collect();
            self_consistency(&head).is_some_and(|w| canonical_answer(&w) == canonical_answer(gold))
        })
        .count();
    hits as f64 / pools.len() as f64
}
