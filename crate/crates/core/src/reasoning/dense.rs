//! Brute-force reference engine for the lazy reasoning implementation.
//!
//! Evaluates the same recurrence with no candidate discovery, no pruning
//! threshold, and no sparse shortcuts: every entity pair and every relation
//! pair is scanned each round, and the propagation formulas run over full
//! probability matrices materialized from the state. Retention keeps the
//! per-row and per-column maxima exactly as the lazy engine does, so the two
//! must agree; the oracle exists to catch discovery and bookkeeping bugs in
//! the sparse path.
// Plain index loops are the point here; keep them even where iterators would
// be idiomatic.
#![allow(clippy::needless_range_loop)]

use super::{AlignmentState, ReasoningError};
use crate::kg::{EntityId, KgPair, RelationId};

const SIZE_LIMIT: usize = 10_000;

/// Runs `n_lr` full-scan rounds from `seeds` at probability `p0` and returns
/// the complete `|E| x |E'|` probability table of the final state.
pub fn dense_reference(
    pair: &KgPair,
    seeds: &[(EntityId, EntityId)],
    p0: f64,
    n_lr: usize,
) -> Result<Vec<Vec<f64>>, ReasoningError> {
    let n = pair.source.entity_count();
    let m = pair.target.entity_count();
    if n * m > SIZE_LIMIT {
        return Err(ReasoningError::SizeGuard(n * m, SIZE_LIMIT));
    }

    let mut state = AlignmentState::new();
    state.seed_pairs(pair, seeds.iter().copied(), p0)?;
    for _ in 0..n_lr {
        state = dense_entity_round(&state, pair);
        state = dense_subrel_round(&state, pair);
    }
    Ok(materialize(&state, pair))
}

fn materialize(state: &AlignmentState, pair: &KgPair) -> Vec<Vec<f64>> {
    let n = pair.source.entity_count();
    let m = pair.target.entity_count();
    let mut table = vec![vec![0.0f64; m]; n];
    for (i, row) in table.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = state.pair_prob(EntityId(i as u32), EntityId(j as u32));
        }
    }
    table
}

fn dense_entity_round(state: &AlignmentState, pair: &KgPair) -> AlignmentState {
    let n = pair.source.entity_count();
    let m = pair.target.entity_count();
    let probs = materialize(state, pair);

    let mut q = vec![vec![0.0f64; m]; n];
    for h in 0..n {
        for h2 in 0..m {
            let mut product = 1.0f64;
            for &(r, t) in pair.source.out_of(EntityId(h as u32)) {
                let f_inv_r = pair.source.inv_fun(r);
                for &(r2, t2) in pair.target.out_of(EntityId(h2 as u32)) {
                    let pt = probs[t.index()][t2.index()];
                    let f1 = 1.0 - f_inv_r * state.subrel_fwd(r, r2) * pt;
                    let f2 = 1.0 - pair.target.inv_fun(r2) * state.subrel_bwd(r2, r) * pt;
                    product *= f1 * f2;
                }
            }
            q[h][h2] = (1.0 - product).clamp(0.0, 1.0);
        }
    }

    let mut next = state.clone();
    for h in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for h2 in 0..m {
            if q[h][h2] > 0.0 && best.is_none_or(|(_, b)| q[h][h2] > b) {
                best = Some((h2, q[h][h2]));
            }
        }
        if let Some((h2, p)) = best {
            next.best_of_source
                .insert(EntityId(h as u32), (EntityId(h2 as u32), p));
        }
    }
    for h2 in 0..m {
        let mut best: Option<(usize, f64)> = None;
        for h in 0..n {
            if q[h][h2] > 0.0 && best.is_none_or(|(_, b)| q[h][h2] > b) {
                best = Some((h, q[h][h2]));
            }
        }
        if let Some((h, p)) = best {
            next.best_of_target
                .insert(EntityId(h2 as u32), (EntityId(h as u32), p));
        }
    }
    next
}

fn dense_subrel_round(state: &AlignmentState, pair: &KgPair) -> AlignmentState {
    let probs = materialize(state, pair);
    let n = pair.source.entity_count();
    let m = pair.target.entity_count();

    let mut next = state.clone();
    next.subrel_fwd.clear();
    next.subrel_bwd.clear();

    // P(r ⊆ r') over source triples.
    for ri in 0..pair.source.relation_count() {
        let r = RelationId(ri as u32);
        let triples = pair.source.relation_pairs(r);
        if triples.is_empty() {
            continue;
        }
        let mut den = 0.0f64;
        for &(h, t) in triples {
            let mut prod = 1.0f64;
            for h2 in 0..m {
                for t2 in 0..m {
                    prod *= 1.0 - probs[h.index()][h2] * probs[t.index()][t2];
                }
            }
            den += 1.0 - prod;
        }
        if den <= 0.0 {
            continue;
        }
        for r2i in 0..pair.target.relation_count() {
            let r2 = RelationId(r2i as u32);
            let mut num = 0.0f64;
            for &(h, t) in triples {
                let mut prod = 1.0f64;
                for &(h2, t2) in pair.target.relation_pairs(r2) {
                    prod *= 1.0 - probs[h.index()][h2.index()] * probs[t.index()][t2.index()];
                }
                num += 1.0 - prod;
            }
            let v = (num / den).min(1.0);
            if v > 0.0 {
                next.subrel_fwd.insert((r, r2), v);
            }
        }
    }

    // P(r' ⊆ r) over target triples.
    for r2i in 0..pair.target.relation_count() {
        let r2 = RelationId(r2i as u32);
        let triples = pair.target.relation_pairs(r2);
        if triples.is_empty() {
            continue;
        }
        let mut den = 0.0f64;
        for &(h2, t2) in triples {
            let mut prod = 1.0f64;
            for h in 0..n {
                for t in 0..n {
                    prod *= 1.0 - probs[h][h2.index()] * probs[t][t2.index()];
                }
            }
            den += 1.0 - prod;
        }
        if den <= 0.0 {
            continue;
        }
        for ri in 0..pair.source.relation_count() {
            let r = RelationId(ri as u32);
            let mut num = 0.0f64;
            for &(h2, t2) in triples {
                let mut prod = 1.0f64;
                for &(h, t) in pair.source.relation_pairs(r) {
                    prod *= 1.0 - probs[h.index()][h2.index()] * probs[t.index()][t2.index()];
                }
                num += 1.0 - prod;
            }
            let v = (num / den).min(1.0);
            if v > 0.0 {
                next.subrel_bwd.insert((r2, r), v);
            }
        }
    }
    next
}
