//! Alignment and subrelation probabilities under lazy sparse storage.
//!
//! The state keeps, per source entity, only its single most probable target
//! (and symmetrically per target entity); every absent pair reads as
//! probability zero. Entity probabilities propagate through matched neighbor
//! triples weighted by inverse functionality and subrelation probabilities;
//! subrelation probabilities are re-estimated each round from the stored
//! alignments. Updates are two-phase: every read comes from the immutable
//! input snapshot and the result is a fresh snapshot, so repeated application
//! to the same input is reproducible bit for bit.
//!
//! Entities untouched by any candidate keep their stored entry. This carries
//! seeded pairs through rounds that produce no evidence for them — in
//! particular through the first round, where all subrelation probabilities
//! are still zero and the entity update has no candidates at all.

mod dense;

pub use dense::dense_reference;

use crate::kg::{EntityId, KgError, KgPair, RelationId};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("seed probability {0} outside (0, 1)")]
    InvalidProbability(f64),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("dense reference refused: |E|*|E'| = {0} exceeds {1}")]
    SizeGuard(usize, usize),
}

/// Knobs for the reasoning loop.
#[derive(Clone, Copy, Debug)]
pub struct ReasoningConfig {
    /// Number of (entity update, subrelation update) rounds.
    pub iterations: usize,
    /// Probabilities strictly below this are dropped from the sparse maps.
    pub theta_min: f64,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            theta_min: 1e-4,
        }
    }
}

/// Sparse best-match alignment state plus subrelation probabilities.
///
/// The two directional maps need not be mutually consistent: a source's best
/// target may itself have a different best source. A pair's probability is
/// the maximum over whichever sides store it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentState {
    /// source entity -> (target entity, probability in (0,1])
    best_of_source: BTreeMap<EntityId, (EntityId, f64)>,
    /// target entity -> (source entity, probability in (0,1])
    best_of_target: BTreeMap<EntityId, (EntityId, f64)>,
    /// (r, r') -> P(r ⊆ r'), stored only when positive
    subrel_fwd: BTreeMap<(RelationId, RelationId), f64>,
    /// (r', r) -> P(r' ⊆ r), stored only when positive
    subrel_bwd: BTreeMap<(RelationId, RelationId), f64>,
}

impl AlignmentState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds pairs at probability `p0` with max semantics on both directional
    /// maps: a weaker existing best match is replaced, a stronger one wins.
    /// Equal probabilities keep the smaller counterpart id, so seeding is
    /// order-independent.
    pub fn seed_pairs(
        &mut self,
        pair: &KgPair,
        seeds: impl IntoIterator<Item = (EntityId, EntityId)>,
        p0: f64,
    ) -> Result<(), ReasoningError> {
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(ReasoningError::InvalidProbability(p0));
        }
        for (s, t) in seeds {
            pair.source.entity(s)?;
            pair.target.entity(t)?;
            upsert(&mut self.best_of_source, s, t, p0);
            upsert(&mut self.best_of_target, t, s, p0);
        }
        Ok(())
    }

    /// Probability stored for the exact pair `(s, t)`, zero when absent.
    pub fn pair_prob(&self, s: EntityId, t: EntityId) -> f64 {
        let a = match self.best_of_source.get(&s) {
            Some(&(bt, p)) if bt == t => p,
            _ => 0.0,
        };
        let b = match self.best_of_target.get(&t) {
            Some(&(bs, p)) if bs == s => p,
            _ => 0.0,
        };
        a.max(b)
    }

    /// Best stored alignment probability of source entity `e`, zero when
    /// unseen. Scans the target-side map; use [`Self::source_prob_index`]
    /// for bulk queries.
    pub fn prob_of(&self, e: EntityId) -> f64 {
        let mut best = self.best_of_source.get(&e).map(|&(_, p)| p).unwrap_or(0.0);
        for &(s, p) in self.best_of_target.values() {
            if s == e && p > best {
                best = p;
            }
        }
        best
    }

    /// Best stored probability per source entity, over both maps.
    pub fn source_prob_index(&self) -> BTreeMap<EntityId, f64> {
        let mut idx = BTreeMap::new();
        for (&s, &(_, p)) in &self.best_of_source {
            merge_max(&mut idx, s, p);
        }
        for &(s, p) in self.best_of_target.values() {
            merge_max(&mut idx, s, p);
        }
        idx
    }

    /// Best stored probability per target entity, over both maps.
    pub fn target_prob_index(&self) -> BTreeMap<EntityId, f64> {
        let mut idx = BTreeMap::new();
        for (&t, &(_, p)) in &self.best_of_target {
            merge_max(&mut idx, t, p);
        }
        for &(t, p) in self.best_of_source.values() {
            merge_max(&mut idx, t, p);
        }
        idx
    }

    /// Every stored pair `(s, t, p)` from both maps, sorted by `(s, t)`,
    /// deduplicated at the max probability.
    pub fn stored_pairs(&self) -> Vec<(EntityId, EntityId, f64)> {
        let mut set: BTreeMap<(EntityId, EntityId), f64> = BTreeMap::new();
        for (&s, &(t, p)) in &self.best_of_source {
            let e = set.entry((s, t)).or_insert(0.0);
            *e = e.max(p);
        }
        for (&t, &(s, p)) in &self.best_of_target {
            let e = set.entry((s, t)).or_insert(0.0);
            *e = e.max(p);
        }
        set.into_iter().map(|((s, t), p)| (s, t, p)).collect()
    }

    /// Stored partners of each source entity, sorted by target id.
    pub fn source_partner_index(&self) -> BTreeMap<EntityId, Vec<(EntityId, f64)>> {
        let mut idx: BTreeMap<EntityId, Vec<(EntityId, f64)>> = BTreeMap::new();
        for (s, t, p) in self.stored_pairs() {
            idx.entry(s).or_default().push((t, p));
        }
        idx
    }

    /// Stored partners of each target entity, sorted by source id.
    pub fn target_partner_index(&self) -> BTreeMap<EntityId, Vec<(EntityId, f64)>> {
        let mut idx: BTreeMap<EntityId, Vec<(EntityId, f64)>> = BTreeMap::new();
        for (s, t, p) in self.stored_pairs() {
            idx.entry(t).or_default().push((s, p));
        }
        idx
    }

    pub fn best_target_of(&self, s: EntityId) -> Option<(EntityId, f64)> {
        self.best_of_source.get(&s).copied()
    }

    pub fn best_source_of(&self, t: EntityId) -> Option<(EntityId, f64)> {
        self.best_of_target.get(&t).copied()
    }

    pub fn aligned_source_count(&self) -> usize {
        self.best_of_source.len()
    }

    pub fn subrel_fwd(&self, r: RelationId, r2: RelationId) -> f64 {
        self.subrel_fwd.get(&(r, r2)).copied().unwrap_or(0.0)
    }

    pub fn subrel_bwd(&self, r2: RelationId, r: RelationId) -> f64 {
        self.subrel_bwd.get(&(r2, r)).copied().unwrap_or(0.0)
    }

    /// Directly installs a subrelation probability. Intended for constructing
    /// states in tests and for the dense reference engine.
    pub fn set_subrel_fwd(&mut self, r: RelationId, r2: RelationId, p: f64) {
        if p > 0.0 {
            self.subrel_fwd.insert((r, r2), p);
        }
    }

    pub fn set_subrel_bwd(&mut self, r2: RelationId, r: RelationId, p: f64) {
        if p > 0.0 {
            self.subrel_bwd.insert((r2, r), p);
        }
    }

    fn has_subrel(&self, r: RelationId, r2: RelationId) -> bool {
        self.subrel_fwd.contains_key(&(r, r2)) || self.subrel_bwd.contains_key(&(r2, r))
    }

    /// Tab-separated `source_id\ttarget_id\tprobability` debug dump of every
    /// stored pair.
    pub fn dump_snapshot(&self, out: &mut impl Write) -> std::io::Result<()> {
        for (s, t, p) in self.stored_pairs() {
            writeln!(out, "{s}\t{t}\t{p}")?;
        }
        Ok(())
    }
}

fn upsert(map: &mut BTreeMap<EntityId, (EntityId, f64)>, key: EntityId, partner: EntityId, p: f64) {
    match map.get(&key) {
        Some(&(old_partner, old_p)) => {
            if p > old_p || (p == old_p && partner < old_partner) {
                map.insert(key, (partner, p));
            }
        }
        None => {
            map.insert(key, (partner, p));
        }
    }
}

fn merge_max(map: &mut BTreeMap<EntityId, f64>, key: EntityId, p: f64) {
    let e = map.entry(key).or_insert(0.0);
    if p > *e {
        *e = p;
    }
}

/// One aggregation of a candidate pair's alignment probability from matched
/// neighbor triples, reading only from `state`:
///
/// `1 - prod over (h,r,t) in out(h), (h',r',t') in out(h') of
///  (1 - F⁻¹(r)·P(r⊆r')·P(t≡t')) · (1 - F⁻¹(r')·P(r'⊆r)·P(t≡t'))`
pub fn entity_pair_probability(
    state: &AlignmentState,
    pair: &KgPair,
    h: EntityId,
    h2: EntityId,
) -> f64 {
    let mut product = 1.0f64;
    for &(r, t) in pair.source.out_of(h) {
        let f_inv_r = pair.source.inv_fun(r);
        for &(r2, t2) in pair.target.out_of(h2) {
            let pt = state.pair_prob(t, t2);
            if pt <= 0.0 {
                continue;
            }
            let pf = state.subrel_fwd(r, r2);
            let pb = state.subrel_bwd(r2, r);
            if pf <= 0.0 && pb <= 0.0 {
                continue;
            }
            let f1 = 1.0 - f_inv_r * pf * pt;
            let f2 = 1.0 - pair.target.inv_fun(r2) * pb * pt;
            product *= f1 * f2;
        }
    }
    (1.0 - product).clamp(0.0, 1.0)
}

/// One entity-probability round. Candidate pairs are discovered from the
/// neighbors of currently stored alignments (a pair qualifies when at least
/// one matched neighbor pair is aligned with a nonzero subrelation
/// probability in either direction), evaluated against the input snapshot,
/// and the best pair per source and per target entity is retained. Entities
/// with no candidates keep their previous entry.
pub fn update_entity_probs(
    state: &AlignmentState,
    pair: &KgPair,
    config: &ReasoningConfig,
) -> AlignmentState {
    let mut candidates: std::collections::BTreeSet<(EntityId, EntityId)> =
        std::collections::BTreeSet::new();
    for (t, t2, _p) in state.stored_pairs() {
        for &(r, h) in pair.source.in_of(t) {
            for &(r2, h2) in pair.target.in_of(t2) {
                if state.has_subrel(r, r2) {
                    candidates.insert((h, h2));
                }
            }
        }
    }

    let mut next = state.clone();
    let mut row_best: BTreeMap<EntityId, (EntityId, f64)> = BTreeMap::new();
    let mut col_best: BTreeMap<EntityId, (EntityId, f64)> = BTreeMap::new();
    for &(h, h2) in &candidates {
        let q = entity_pair_probability(state, pair, h, h2);
        if q <= 0.0 || q < config.theta_min {
            continue;
        }
        upsert(&mut row_best, h, h2, q);
        upsert(&mut col_best, h2, h, q);
    }
    for (h, best) in row_best {
        next.best_of_source.insert(h, best);
    }
    for (h2, best) in col_best {
        next.best_of_target.insert(h2, best);
    }
    next
}

/// One subrelation round. For every relation pair co-occurring on aligned
/// endpoint pairs, `P(r ⊆ r')` is the ratio of two sums over the triples of
/// `r`: the numerator term of a triple counts target triples of `r'` whose
/// endpoints align with it, the denominator term counts any aligned target
/// endpoint combination. Under lazy storage both inner products range over
/// the stored partners only; absent pairs contribute factor one. The
/// subrelation maps are rebuilt from scratch each round.
pub fn update_subrel_probs(
    state: &AlignmentState,
    pair: &KgPair,
    config: &ReasoningConfig,
) -> AlignmentState {
    let src_partners = state.source_partner_index();
    let tgt_partners = state.target_partner_index();

    let fwd = subrel_direction(
        &src_partners,
        |r| pair.source.relation_pairs(r),
        |h, t| pair.target.edge_relations(h, t),
        pair.source.relation_count(),
        config.theta_min,
    );
    let bwd = subrel_direction(
        &tgt_partners,
        |r| pair.target.relation_pairs(r),
        |h, t| pair.source.edge_relations(h, t),
        pair.target.relation_count(),
        config.theta_min,
    );

    let mut next = state.clone();
    next.subrel_fwd = fwd;
    next.subrel_bwd = bwd;
    next
}

fn subrel_direction<'a>(
    partners: &BTreeMap<EntityId, Vec<(EntityId, f64)>>,
    relation_pairs: impl Fn(RelationId) -> &'a [(EntityId, EntityId)],
    edge_relations: impl Fn(EntityId, EntityId) -> &'a [RelationId],
    relation_count: usize,
    theta_min: f64,
) -> BTreeMap<(RelationId, RelationId), f64> {
    let mut numerators: BTreeMap<(RelationId, RelationId), f64> = BTreeMap::new();
    let mut denominators: BTreeMap<RelationId, f64> = BTreeMap::new();

    for ri in 0..relation_count {
        let r = RelationId(ri as u32);
        for &(h, t) in relation_pairs(r) {
            let (Some(hp), Some(tp)) = (partners.get(&h), partners.get(&t)) else {
                continue;
            };
            let mut den_prod = 1.0f64;
            let mut per_rel: BTreeMap<RelationId, f64> = BTreeMap::new();
            for &(h2, ph) in hp {
                for &(t2, pt) in tp {
                    let factor = 1.0 - ph * pt;
                    den_prod *= factor;
                    for &r2 in edge_relations(h2, t2) {
                        *per_rel.entry(r2).or_insert(1.0) *= factor;
                    }
                }
            }
            let den_term = 1.0 - den_prod;
            if den_term > 0.0 {
                *denominators.entry(r).or_insert(0.0) += den_term;
            }
            for (r2, prod) in per_rel {
                *numerators.entry((r, r2)).or_insert(0.0) += 1.0 - prod;
            }
        }
    }

    let mut out = BTreeMap::new();
    for ((r, r2), num) in numerators {
        let den = denominators.get(&r).copied().unwrap_or(0.0);
        if den <= 0.0 {
            continue;
        }
        let v = (num / den).min(1.0);
        if v > 0.0 && v >= theta_min {
            out.insert((r, r2), v);
        }
    }
    out
}

/// Runs `config.iterations` rounds of entity and subrelation updates.
pub fn propagate(
    state: &AlignmentState,
    pair: &KgPair,
    config: &ReasoningConfig,
) -> AlignmentState {
    let mut cur = state.clone();
    for _ in 0..config.iterations {
        cur = update_entity_probs(&cur, pair, config);
        cur = update_subrel_probs(&cur, pair, config);
    }
    cur
}
