//! Brute-force reference model of the alignment-guided masking process.
//!
//! Enumerates every pair-traversal order and every coin sequence of the
//! documented process and returns the exact probability of each aligned
//! outcome (which tokens and patches end up masked through a pair). This
//! is written directly from the process definition and shares no code with
//! `select_masking`, so sampled runs of the implementation can be checked
//! against it. Random-fallback selections never carry aligned provenance,
//! so they do not enter the statistic. Feasible for a handful of pairs.

use std::collections::BTreeMap;

use super::{token_budget, PATCH_BUDGETS};
use crate::kpg::id_to_level_row_col;

pub type Outcome = (Vec<usize>, Vec<usize>);

/// Exact distribution over (masked aligned tokens, masked aligned patches).
pub fn aligned_outcome_distribution(
    token_count: usize,
    pairs: &[(usize, usize)],
) -> BTreeMap<Outcome, f64> {
    assert!(pairs.len() <= 6, "enumeration is exponential; keep instances tiny");
    let mut dist = BTreeMap::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let perm_weight = 1.0 / factorial(pairs.len()) as f64;
    permute(&mut order, 0, &mut |perm| {
        walk(
            perm,
            0,
            pairs,
            token_count,
            &mut Vec::new(),
            &mut Vec::new(),
            perm_weight,
            &mut dist,
        );
    });
    dist
}

fn factorial(n: usize) -> usize {
    (1..=n).product::<usize>().max(1)
}

fn permute(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, f);
        items.swap(k, i);
    }
}

#[allow(clippy::too_many_arguments)]
fn walk(
    perm: &[usize],
    step: usize,
    pairs: &[(usize, usize)],
    token_count: usize,
    tokens: &mut Vec<usize>,
    patches: &mut Vec<usize>,
    prob: f64,
    dist: &mut BTreeMap<Outcome, f64>,
) {
    let tok_budget = token_budget(token_count);
    let level_count = |patches: &[usize], level: usize| {
        patches.iter().filter(|&&p| id_to_level_row_col(p).0 == level).count()
    };
    let budgets_full = |tokens: &[usize], patches: &[usize]| {
        tokens.len() >= tok_budget
            && (3..=5).all(|l| level_count(patches, l) >= PATCH_BUDGETS[l - 3])
    };

    if step == perm.len() || budgets_full(tokens, patches) {
        let mut t = tokens.clone();
        let mut p = patches.clone();
        t.sort_unstable();
        p.sort_unstable();
        *dist.entry((t, p)).or_insert(0.0) += prob;
        return;
    }

    let (token, patch) = pairs[perm[step]];
    let level = id_to_level_row_col(patch).0;
    let token_free = tokens.len() < tok_budget && !tokens.contains(&token);
    let patch_free =
        level_count(patches, level) < PATCH_BUDGETS[level - 3] && !patches.contains(&patch);

    // coin = heads: token side first; tails: patch side first. The loser
    // side is tried when the chosen side cannot accept.
    for token_first in [true, false] {
        let mut took_token = false;
        let mut took_patch = false;
        if token_first {
            if token_free {
                took_token = true;
            } else if patch_free {
                took_patch = true;
            }
        } else if patch_free {
            took_patch = true;
        } else if token_free {
            took_token = true;
        }
        if took_token {
            tokens.push(token);
        }
        if took_patch {
            patches.push(patch);
        }
        walk(perm, step + 1, pairs, token_count, tokens, patches, prob * 0.5, dist);
        if took_token {
            tokens.pop();
        }
        if took_patch {
            patches.pop();
        }
    }
}

/// Marginal probability that `token` is masked through a pair.
pub fn token_masked_probability(dist: &BTreeMap<Outcome, f64>, token: usize) -> f64 {
    dist.iter().filter(|((t, _), _)| t.contains(&token)).map(|(_, p)| p).sum()
}

/// Marginal probability that `patch` is masked through a pair.
pub fn patch_masked_probability(dist: &BTreeMap<Outcome, f64>, patch: usize) -> f64 {
    dist.iter().filter(|((_, pt), _)| pt.contains(&patch)).map(|(_, p)| p).sum()
}

/// Under uniform random masking, P(a given token is masked).
pub fn random_token_probability(token_count: usize) -> f64 {
    token_budget(token_count) as f64 / token_count as f64
}

/// Under uniform random masking, P(a given patch is masked).
pub fn random_patch_probability(patch_id: usize) -> f64 {
    let level = id_to_level_row_col(patch_id).0;
    PATCH_BUDGETS[level - 3] as f64 / (level * level) as f64
}

/// Total variation distance between two outcome distributions.
pub fn total_variation(a: &BTreeMap<Outcome, f64>, b: &BTreeMap<Outcome, f64>) -> f64 {
    let mut keys: Vec<&Outcome> = a.keys().collect();
    for k in b.keys() {
        if !a.contains_key(k) {
            keys.push(k);
        }
    }
    let mut tv = 0.0;
    for k in keys {
        let pa = a.get(k).copied().unwrap_or(0.0);
        let pb = b.get(k).copied().unwrap_or(0.0);
        tv += (pa - pb).abs();
    }
    tv / 2.0
}
