//! Knowledge graph storage: entity/relation catalogs, indexed relation
//! triples, and per-relation functionality statistics.
//!
//! A [`KnowledgeGraph`] is immutable after construction and safe to share
//! read-only across threads. Incoming edges can be materialized as synthetic
//! reversed relations (`r⁻`) so that downstream reasoning and uncertainty
//! scoring see both directions through a single outgoing-triple interface;
//! the functionality of a reversed relation is the inverse functionality of
//! its forward twin, copied from the cache rather than recounted.

mod openea;

pub use openea::{load_openea, write_openea, LoadReport};

use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use thiserror::Error;

/// Dense handle for an entity within one knowledge graph.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct EntityId(pub u32);

/// Dense handle for a relation within one knowledge graph.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One directed relation triple `(head, relation, tail)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entity {
    pub uri: String,
    pub name: String,
}

#[derive(Clone, Debug)]
pub struct Relation {
    pub uri: String,
    pub name: String,
    /// Id of the opposite-direction twin, when reversal is materialized.
    pub inverse_of: Option<RelationId>,
    /// True for synthetic reversed relations.
    pub reversed: bool,
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("invalid entity handle {0} (graph has {1} entities)")]
    InvalidEntity(u32, usize),
    #[error("invalid relation handle {0} (graph has {1} relations)")]
    InvalidRelation(u32, usize),
    #[error("relation {0} has no triples; functionality is undefined")]
    EmptyRelation(u32),
    #[error("entity {0} has an empty name")]
    EmptyName(u32),
    #[error("{file}:{line}: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("missing input file {0}")]
    MissingFile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Construction options shared by the loader and the synthetic generator.
#[derive(Clone, Copy, Debug)]
pub struct KgOptions {
    /// Materialize a reversed relation `r⁻` for every relation `r`, with
    /// swapped triples, so incoming edges participate in neighbor-based
    /// computations. Disable for ablation.
    pub reverse_relations: bool,
}

impl Default for KgOptions {
    fn default() -> Self {
        Self {
            reverse_relations: true,
        }
    }
}

/// One indexed knowledge graph.
#[derive(Debug)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    triples: Vec<Triple>,
    /// Outgoing `(relation, tail)` per head, sorted by (relation, tail).
    out_pairs: Vec<Vec<(RelationId, EntityId)>>,
    /// Incoming `(relation, head)` per tail, sorted by (relation, head).
    in_pairs: Vec<Vec<(RelationId, EntityId)>>,
    /// `(head, tail)` per relation, in triple-id order.
    by_relation: Vec<Vec<(EntityId, EntityId)>>,
    /// Relations connecting a `(head, tail)` entity pair, sorted by id.
    edge_relations: HashMap<(u32, u32), Vec<RelationId>>,
    functionality: Vec<f64>,
    inv_functionality: Vec<f64>,
    forward_relation_count: usize,
    forward_triple_count: usize,
    reverse_enabled: bool,
}

impl KnowledgeGraph {
    /// Index a graph from raw parts. Duplicate triples are dropped (the count
    /// is returned) because functionality is defined over distinct pairs.
    pub fn build(
        entities: Vec<Entity>,
        relations: Vec<Relation>,
        triples: Vec<Triple>,
        options: KgOptions,
    ) -> Result<(Self, usize), KgError> {
        for (i, e) in entities.iter().enumerate() {
            if e.name.is_empty() {
                return Err(KgError::EmptyName(i as u32));
            }
        }
        let n_ent = entities.len();
        let n_rel = relations.len();

        let mut seen = HashSet::with_capacity(triples.len());
        let mut deduped = Vec::with_capacity(triples.len());
        let mut duplicates = 0usize;
        for t in triples {
            if t.head.index() >= n_ent || t.tail.index() >= n_ent {
                return Err(KgError::InvalidEntity(t.head.0.max(t.tail.0), n_ent));
            }
            if t.relation.index() >= n_rel {
                return Err(KgError::InvalidRelation(t.relation.0, n_rel));
            }
            if seen.insert(t) {
                deduped.push(t);
            } else {
                duplicates += 1;
            }
        }

        let forward_relation_count = n_rel;
        let forward_triple_count = deduped.len();
        let mut relations = relations;
        let mut all_triples = deduped;

        if options.reverse_relations {
            let mut reversed_rels = Vec::with_capacity(n_rel);
            for (i, r) in relations.iter_mut().enumerate() {
                let rev_id = RelationId((n_rel + i) as u32);
                r.inverse_of = Some(rev_id);
                reversed_rels.push(Relation {
                    uri: format!("{}⁻", r.uri),
                    name: format!("{}⁻", r.name),
                    inverse_of: Some(RelationId(i as u32)),
                    reversed: true,
                });
            }
            relations.extend(reversed_rels);
            for i in 0..forward_triple_count {
                let t = all_triples[i];
                all_triples.push(Triple::new(
                    t.tail,
                    RelationId((n_rel + t.relation.index()) as u32),
                    t.head,
                ));
            }
        }

        let mut out_pairs = vec![Vec::new(); n_ent];
        let mut in_pairs = vec![Vec::new(); n_ent];
        let mut by_relation = vec![Vec::new(); relations.len()];
        let mut edge_relations: HashMap<(u32, u32), Vec<RelationId>> = HashMap::new();
        for t in &all_triples {
            out_pairs[t.head.index()].push((t.relation, t.tail));
            in_pairs[t.tail.index()].push((t.relation, t.head));
            by_relation[t.relation.index()].push((t.head, t.tail));
            edge_relations
                .entry((t.head.0, t.tail.0))
                .or_default()
                .push(t.relation);
        }
        for v in &mut out_pairs {
            v.sort_unstable();
        }
        for v in &mut in_pairs {
            v.sort_unstable();
        }
        for v in edge_relations.values_mut() {
            v.sort_unstable();
        }

        // Functionality over distinct pairs; reversed relations derive from
        // the forward cache.
        let mut functionality = vec![f64::NAN; relations.len()];
        let mut inv_functionality = vec![f64::NAN; relations.len()];
        for r in 0..forward_relation_count {
            let pairs = &by_relation[r];
            if pairs.is_empty() {
                continue;
            }
            let heads: HashSet<u32> = pairs.iter().map(|(h, _)| h.0).collect();
            let tails: HashSet<u32> = pairs.iter().map(|(_, t)| t.0).collect();
            functionality[r] = heads.len() as f64 / pairs.len() as f64;
            inv_functionality[r] = tails.len() as f64 / pairs.len() as f64;
        }
        if options.reverse_relations {
            let (fwd_fun, rev_fun) = functionality.split_at_mut(forward_relation_count);
            let (fwd_inv, rev_inv) = inv_functionality.split_at_mut(forward_relation_count);
            rev_fun.copy_from_slice(fwd_inv);
            rev_inv.copy_from_slice(fwd_fun);
        }

        Ok((
            Self {
                entities,
                relations,
                triples: all_triples,
                out_pairs,
                in_pairs,
                by_relation,
                edge_relations,
                functionality,
                inv_functionality,
                forward_relation_count,
                forward_triple_count,
                reverse_enabled: options.reverse_relations,
            },
            duplicates,
        ))
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Total relation count, including reversed relations when materialized.
    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn forward_relation_count(&self) -> usize {
        self.forward_relation_count
    }

    /// Total triple count, including reversed triples when materialized.
    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn forward_triple_count(&self) -> usize {
        self.forward_triple_count
    }

    pub fn reverse_enabled(&self) -> bool {
        self.reverse_enabled
    }

    pub fn entity(&self, e: EntityId) -> Result<&Entity, KgError> {
        self.entities
            .get(e.index())
            .ok_or(KgError::InvalidEntity(e.0, self.entities.len()))
    }

    pub fn relation(&self, r: RelationId) -> Result<&Relation, KgError> {
        self.relations
            .get(r.index())
            .ok_or(KgError::InvalidRelation(r.0, self.relations.len()))
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entities[e.index()].name
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relations[r.index()].name
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.relations.len() as u32).map(RelationId)
    }

    /// All triples in id order (forward first, then reversed when enabled).
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Forward triples only, as loaded.
    pub fn forward_triples(&self) -> &[Triple] {
        &self.triples[..self.forward_triple_count]
    }

    /// Outgoing `(relation, tail)` pairs of `e`, sorted by (relation, tail).
    pub fn neighbors_out(&self, e: EntityId) -> Result<&[(RelationId, EntityId)], KgError> {
        self.out_pairs
            .get(e.index())
            .map(Vec::as_slice)
            .ok_or(KgError::InvalidEntity(e.0, self.entities.len()))
    }

    /// Incoming `(relation, head)` pairs of `e`, sorted by (relation, head).
    pub fn neighbors_in(&self, e: EntityId) -> Result<&[(RelationId, EntityId)], KgError> {
        self.in_pairs
            .get(e.index())
            .map(Vec::as_slice)
            .ok_or(KgError::InvalidEntity(e.0, self.entities.len()))
    }

    pub(crate) fn out_of(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_pairs[e.index()]
    }

    pub(crate) fn in_of(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.in_pairs[e.index()]
    }

    /// Outgoing degree of `e` over the indexed triples (includes reversed
    /// edges when materialized, i.e. the total degree).
    pub fn degree(&self, e: EntityId) -> usize {
        self.out_pairs[e.index()].len()
    }

    /// `(head, tail)` pairs of relation `r` in triple-id order.
    pub fn relation_pairs(&self, r: RelationId) -> &[(EntityId, EntityId)] {
        &self.by_relation[r.index()]
    }

    /// Relations connecting `head -> tail`, sorted by id; empty if none.
    pub fn edge_relations(&self, head: EntityId, tail: EntityId) -> &[RelationId] {
        self.edge_relations
            .get(&(head.0, tail.0))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Functionality F(r): distinct heads over distinct (head, tail) pairs.
    pub fn functionality(&self, r: RelationId) -> Result<f64, KgError> {
        let v = *self
            .functionality
            .get(r.index())
            .ok_or(KgError::InvalidRelation(r.0, self.relations.len()))?;
        if v.is_nan() {
            return Err(KgError::EmptyRelation(r.0));
        }
        Ok(v)
    }

    /// Inverse functionality F⁻¹(r): distinct tails over distinct pairs.
    pub fn inverse_functionality(&self, r: RelationId) -> Result<f64, KgError> {
        let v = *self
            .inv_functionality
            .get(r.index())
            .ok_or(KgError::InvalidRelation(r.0, self.relations.len()))?;
        if v.is_nan() {
            return Err(KgError::EmptyRelation(r.0));
        }
        Ok(v)
    }

    /// Cached F⁻¹ without the handle checks, for inner reasoning loops.
    pub(crate) fn inv_fun(&self, r: RelationId) -> f64 {
        self.inv_functionality[r.index()]
    }

    pub(crate) fn fun(&self, r: RelationId) -> f64 {
        self.functionality[r.index()]
    }
}

/// Ground-truth alignment set between a pair of graphs.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pairs: Vec<(EntityId, EntityId)>,
    by_source: HashMap<EntityId, EntityId>,
    pair_set: HashSet<(EntityId, EntityId)>,
}

impl GroundTruth {
    /// Builds the set, deduplicating exact repeats. A source entity mapped to
    /// two different targets is rejected.
    pub fn new(pairs: Vec<(EntityId, EntityId)>) -> Result<Self, String> {
        let mut gt = GroundTruth::default();
        for (s, t) in pairs {
            match gt.by_source.get(&s) {
                Some(prev) if *prev != t => {
                    return Err(format!("source entity {s} linked to both {prev} and {t}"));
                }
                Some(_) => continue,
                None => {
                    gt.by_source.insert(s, t);
                    gt.pair_set.insert((s, t));
                    gt.pairs.push((s, t));
                }
            }
        }
        Ok(gt)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(EntityId, EntityId)] {
        &self.pairs
    }

    pub fn contains(&self, source: EntityId, target: EntityId) -> bool {
        self.pair_set.contains(&(source, target))
    }

    pub fn target_of(&self, source: EntityId) -> Option<EntityId> {
        self.by_source.get(&source).copied()
    }
}

/// A source/target graph pair plus optional ground-truth alignments.
#[derive(Debug)]
pub struct KgPair {
    pub source: KnowledgeGraph,
    pub target: KnowledgeGraph,
    pub ground_truth: Option<GroundTruth>,
}

impl KgPair {
    pub fn new(
        source: KnowledgeGraph,
        target: KnowledgeGraph,
        ground_truth: Option<GroundTruth>,
    ) -> Result<Self, KgError> {
        if let Some(gt) = &ground_truth {
            for &(s, t) in gt.pairs() {
                source.entity(s)?;
                target.entity(t)?;
            }
        }
        Ok(Self {
            source,
            target,
            ground_truth,
        })
    }

    /// Swapped view for symmetry checks: target becomes source and the
    /// ground truth is transposed.
    pub fn swapped(self) -> Self {
        let gt = self.ground_truth.map(|gt| {
            GroundTruth::new(gt.pairs.iter().map(|&(s, t)| (t, s)).collect())
                .expect("transposed ground truth stays consistent")
        });
        Self {
            source: self.target,
            target: self.source,
            ground_truth: gt,
        }
    }
}

/// Last URI path segment, percent-decoded. Falls back to the full string
/// when the segment is empty.
pub fn extract_name(uri: &str) -> String {
    let seg = uri.rsplit('/').next().unwrap_or(uri);
    let seg = if seg.is_empty() { uri } else { seg };
    percent_encoding::percent_decode_str(seg)
        .decode_utf8_lossy()
        .into_owned()
}
