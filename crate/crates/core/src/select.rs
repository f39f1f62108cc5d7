//! Uncertainty scoring and budget-aware selection of source entities.
//!
//! Relational uncertainty weighs each outgoing triple by the relation's
//! functionality; neighbor uncertainty counts triples unweighted. The two
//! rankings are fused by mean reciprocal rank. Entities annotated in earlier
//! iterations are excluded from the ranking pool entirely, and scores are
//! recomputed from the refreshed alignment state each iteration.

use crate::kg::{EntityId, KgPair};
use crate::reasoning::AlignmentState;
use std::collections::BTreeSet;
use std::io::Write;

/// Weight applied to a triple in relational uncertainty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UrWeight {
    /// Functionality F(r), as the uncertainty definition states.
    #[default]
    Functionality,
    /// Inverse functionality F⁻¹(r), the quantity the propagation formula
    /// uses; kept selectable for ablation.
    InverseFunctionality,
}

/// `u_r(e) = (1 - P(e)) + sum over (e,r,t) of w(r) * (1 - P(t))`, indexed by
/// source entity id. Reversed relations participate when materialized.
pub fn relational_uncertainty(pair: &KgPair, state: &AlignmentState, weight: UrWeight) -> Vec<f64> {
    let probs = state.source_prob_index();
    let p_of = |e: EntityId| probs.get(&e).copied().unwrap_or(0.0);
    pair.source
        .entity_ids()
        .map(|e| {
            let mut u = 1.0 - p_of(e);
            for &(r, t) in pair.source.out_of(e) {
                let w = match weight {
                    UrWeight::Functionality => pair.source.fun(r),
                    UrWeight::InverseFunctionality => pair.source.inv_fun(r),
                };
                u += w * (1.0 - p_of(t));
            }
            u
        })
        .collect()
}

/// `u_n(e) = (1 - P(e)) + sum over (e,r,t) of (1 - P(t))`.
pub fn neighbor_uncertainty(pair: &KgPair, state: &AlignmentState) -> Vec<f64> {
    let probs = state.source_prob_index();
    let p_of = |e: EntityId| probs.get(&e).copied().unwrap_or(0.0);
    pair.source
        .entity_ids()
        .map(|e| {
            let mut u = 1.0 - p_of(e);
            for &(_, t) in pair.source.out_of(e) {
                u += 1.0 - p_of(t);
            }
            u
        })
        .collect()
}

/// Static degree score `1 + degree(e)`, for the degree-ranking ablation.
pub fn degree_scores(pair: &KgPair) -> Vec<f64> {
    pair.source
        .entity_ids()
        .map(|e| 1.0 + pair.source.degree(e) as f64)
        .collect()
}

/// Static functionality-sum score `1 + sum F(r)`, for the funcSum ablation.
pub fn functionality_sum_scores(pair: &KgPair) -> Vec<f64> {
    pair.source
        .entity_ids()
        .map(|e| {
            1.0 + pair
                .source
                .out_of(e)
                .iter()
                .map(|&(r, _)| pair.source.fun(r))
                .sum::<f64>()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct ScoreEntry {
    pub entity: EntityId,
    pub u_r: f64,
    pub u_n: f64,
    /// Ordinal rank under u_r, 1 = largest, ties broken by ascending id.
    pub rank_ur: usize,
    pub rank_un: usize,
    /// `2 * (1/rank_ur + 1/rank_un)`.
    pub u: f64,
}

/// Aggregated scores over a ranking pool, ordered best first.
#[derive(Clone, Debug, Default)]
pub struct UncertaintyScores {
    entries: Vec<ScoreEntry>,
}

impl UncertaintyScores {
    /// Entries sorted by descending `u`, ties by ascending entity id.
    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn get(&self, e: EntityId) -> Option<&ScoreEntry> {
        self.entries.iter().find(|s| s.entity == e)
    }

    /// CSV dump: `entity_id,name,u_r,u_n,rank_ur,rank_un,u`.
    pub fn write_csv(&self, pair: &KgPair, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["entity_id", "name", "u_r", "u_n", "rank_ur", "rank_un", "u"])?;
        for s in &self.entries {
            w.write_record(&[
                s.entity.to_string(),
                pair.source.entity_name(s.entity).to_string(),
                s.u_r.to_string(),
                s.u_n.to_string(),
                s.rank_ur.to_string(),
                s.rank_un.to_string(),
                s.u.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ordinal ranks over `pool` by descending score, ties by ascending id;
/// `ranks[i]` corresponds to `pool[i]`.
fn ordinal_ranks(pool: &[EntityId], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        scores[pool[b].index()]
            .partial_cmp(&scores[pool[a].index()])
            .expect("scores are finite")
            .then(pool[a].cmp(&pool[b]))
    });
    let mut ranks = vec![0usize; pool.len()];
    for (rank0, &i) in order.iter().enumerate() {
        ranks[i] = rank0 + 1;
    }
    ranks
}

/// Fuses the two uncertainty metrics by mean reciprocal rank over `pool`.
/// Both score vectors are indexed by entity id over the full source KG.
pub fn aggregate(pool: &[EntityId], u_r: &[f64], u_n: &[f64]) -> UncertaintyScores {
    let rank_ur = ordinal_ranks(pool, u_r);
    let rank_un = ordinal_ranks(pool, u_n);
    let mut entries: Vec<ScoreEntry> = pool
        .iter()
        .enumerate()
        .map(|(i, &e)| ScoreEntry {
            entity: e,
            u_r: u_r[e.index()],
            u_n: u_n[e.index()],
            rank_ur: rank_ur[i],
            rank_un: rank_un[i],
            u: 2.0 * (1.0 / rank_ur[i] as f64 + 1.0 / rank_un[i] as f64),
        })
        .collect();
    entries.sort_by(|a, b| {
        b.u.partial_cmp(&a.u)
            .expect("u is finite")
            .then(a.entity.cmp(&b.entity))
    });
    UncertaintyScores { entries }
}

/// The up-to-`k` highest-u entities not already annotated, in score order.
/// Returns fewer than `k` only when the pool is exhausted.
pub fn select(
    scores: &UncertaintyScores,
    already_annotated: &BTreeSet<EntityId>,
    k: usize,
) -> Vec<EntityId> {
    scores
        .entries
        .iter()
        .filter(|s| !already_annotated.contains(&s.entity))
        .take(k)
        .map(|s| s.entity)
        .collect()
}

/// Top-k of `pool` by a single score vector, ties by ascending id. Used by
/// the single-metric selection ablations.
pub fn select_by_score(
    pool: &[EntityId],
    scores: &[f64],
    already_annotated: &BTreeSet<EntityId>,
    k: usize,
) -> Vec<EntityId> {
    let mut order: Vec<EntityId> = pool
        .iter()
        .copied()
        .filter(|e| !already_annotated.contains(e))
        .collect();
    order.sort_by(|&a, &b| {
        scores[b.index()]
            .partial_cmp(&scores[a.index()])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Entity, KgOptions, KnowledgeGraph, Relation, RelationId, Triple};

    fn kg(n_ent: usize, triples: &[(u32, u32, u32)], reverse: bool) -> KnowledgeGraph {
        let rels = triples.iter().map(|t| t.1).max().map_or(0, |m| m + 1) as usize;
        let (g, _) = KnowledgeGraph::build(
            (0..n_ent)
                .map(|i| Entity {
                    uri: format!("e{i}"),
                    name: format!("e{i}"),
                })
                .collect(),
            (0..rels)
                .map(|i| Relation {
                    uri: format!("r{i}"),
                    name: format!("r{i}"),
                    inverse_of: None,
                    reversed: false,
                })
                .collect(),
            triples
                .iter()
                .map(|&(h, r, t)| Triple::new(EntityId(h), RelationId(r), EntityId(t)))
                .collect(),
            KgOptions {
                reverse_relations: reverse,
            },
        )
        .unwrap();
        g
    }

    fn pair(src: KnowledgeGraph) -> KgPair {
        KgPair::new(src, kg(1, &[], false), None).unwrap()
    }

    #[test]
    fn isolated_entity_scores_one() {
        let p = pair(kg(2, &[(0, 0, 1)], false));
        let st = AlignmentState::new();
        let ur = relational_uncertainty(&p, &st, UrWeight::Functionality);
        let un = neighbor_uncertainty(&p, &st);
        assert_eq!(ur[1], 1.0);
        assert_eq!(un[1], 1.0);
    }

    #[test]
    fn two_unit_functionality_triples_score_three() {
        // Two outgoing triples under distinct relations, each with F = 1.
        let p = pair(kg(3, &[(0, 0, 1), (0, 1, 2)], false));
        let st = AlignmentState::new();
        let ur = relational_uncertainty(&p, &st, UrWeight::Functionality);
        assert_eq!(ur[0], 3.0);
    }

    #[test]
    fn certain_neighbors_reduce_uncertainty() {
        let p = pair(kg(3, &[(0, 0, 1), (0, 1, 2)], false));
        let mut st = AlignmentState::new();
        let almost_one = 1.0 - f64::EPSILON;
        st.seed_pairs(
            &p,
            [(EntityId(1), EntityId(0)), (EntityId(2), EntityId(0))],
            almost_one,
        )
        .unwrap();
        st.seed_pairs(&p, [(EntityId(0), EntityId(0))], 0.5)
            .unwrap();
        let ur = relational_uncertainty(&p, &st, UrWeight::Functionality);
        assert!((ur[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn degree_five_neighbor_uncertainty() {
        let p = pair(kg(
            6,
            &[(0, 0, 1), (0, 0, 2), (0, 0, 3), (0, 0, 4), (0, 0, 5)],
            false,
        ));
        let st = AlignmentState::new();
        let un = neighbor_uncertainty(&p, &st);
        assert_eq!(un[0], 6.0);
    }

    #[test]
    fn all_aligned_scores_vanish() {
        let p = pair(kg(2, &[(0, 0, 1)], false));
        let mut st = AlignmentState::new();
        let almost_one = 1.0 - f64::EPSILON;
        st.seed_pairs(
            &p,
            [(EntityId(0), EntityId(0)), (EntityId(1), EntityId(0))],
            almost_one,
        )
        .unwrap();
        let un = neighbor_uncertainty(&p, &st);
        assert!(un[0].abs() < 1e-9);
    }

    #[test]
    fn rank_one_in_both_metrics_scores_four() {
        let p = pair(kg(3, &[(0, 0, 1), (0, 0, 2)], false));
        let st = AlignmentState::new();
        let pool: Vec<EntityId> = p.source.entity_ids().collect();
        let ur = relational_uncertainty(&p, &st, UrWeight::Functionality);
        let un = neighbor_uncertainty(&p, &st);
        let scores = aggregate(&pool, &ur, &un);
        let top = &scores.entries()[0];
        assert_eq!(top.entity, EntityId(0));
        assert_eq!(top.u, 4.0);
        // u = 4 for exactly one entity.
        assert_eq!(scores.entries().iter().filter(|s| s.u == 4.0).count(), 1);
    }

    #[test]
    fn mixed_ranks_follow_the_formula() {
        // Hand-built score vectors over four entities.
        let pool: Vec<EntityId> = (0..4).map(EntityId).collect();
        let ur = vec![4.0, 3.0, 2.0, 1.0];
        let un = vec![1.0, 2.0, 3.0, 4.0];
        let scores = aggregate(&pool, &ur, &un);
        let e1 = scores.get(EntityId(1)).unwrap();
        assert_eq!(e1.rank_ur, 2);
        assert_eq!(e1.rank_un, 3);
        assert!((e1.u - 2.0 * (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn scaling_a_metric_preserves_ranks_and_u() {
        let pool: Vec<EntityId> = (0..4).map(EntityId).collect();
        let ur = vec![4.0, 3.0, 2.0, 1.0];
        let un = vec![1.0, 5.0, 3.0, 4.0];
        let base = aggregate(&pool, &ur, &un);
        let scaled: Vec<f64> = ur.iter().map(|v| v * 17.5).collect();
        let after = aggregate(&pool, &scaled, &un);
        for (a, b) in base.entries().iter().zip(after.entries()) {
            assert_eq!(a.entity, b.entity);
            assert_eq!(a.rank_ur, b.rank_ur);
            assert_eq!(a.u, b.u);
        }
    }

    #[test]
    fn star_hub_is_selected_first() {
        // Without reversed edges the hub strictly dominates both metrics:
        // u_r = 1 + 5 * F(r) vs 1, u_n = 6 vs 1.
        let p = pair(kg(
            6,
            &[(0, 0, 1), (0, 0, 2), (0, 0, 3), (0, 0, 4), (0, 0, 5)],
            false,
        ));
        let st = AlignmentState::new();
        let pool: Vec<EntityId> = p.source.entity_ids().collect();
        let ur = relational_uncertainty(&p, &st, UrWeight::Functionality);
        let un = neighbor_uncertainty(&p, &st);
        let scores = aggregate(&pool, &ur, &un);
        let picked = select(&scores, &BTreeSet::new(), 1);
        assert_eq!(picked, vec![EntityId(0)]);
    }

    #[test]
    fn select_respects_exclusions_and_pool_size() {
        let pool: Vec<EntityId> = (0..4).map(EntityId).collect();
        let ur = vec![4.0, 3.0, 2.0, 1.0];
        let un = vec![4.0, 3.0, 2.0, 1.0];
        let scores = aggregate(&pool, &ur, &un);

        let all = select(&scores, &BTreeSet::new(), 10);
        assert_eq!(all.len(), 4);

        let mut annotated = BTreeSet::new();
        annotated.insert(EntityId(0));
        annotated.insert(EntityId(2));
        let picked = select(&scores, &annotated, 3);
        assert_eq!(picked, vec![EntityId(1), EntityId(3)]);
        assert!(picked.iter().all(|e| !annotated.contains(e)));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let pool: Vec<EntityId> = (0..3).map(EntityId).collect();
        let flat = vec![1.0, 1.0, 1.0];
        let scores = aggregate(&pool, &flat, &flat);
        let ids: Vec<EntityId> = scores.entries().iter().map(|s| s.entity).collect();
        assert_eq!(ids, vec![EntityId(0), EntityId(1), EntityId(2)]);
    }
}
