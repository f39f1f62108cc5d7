//! Greedy refinement of a noisy pseudo-label set by structural
//! incompatibility.
//!
//! Labels are seeded into the reasoning state at `delta0`; each iteration
//! runs one entity-probability round and one subrelation round, admits labels
//! whose probability rose above `delta0`, drops retained labels that fell
//! strictly below the best stored probability on either side, and elevates
//! the survivors to at least `delta1`. The returned set is the survivors
//! plus, when enabled, any stored pair above `delta1`; pairs outside the
//! input set are tagged [`Provenance::Inferred`].

use crate::kg::{EntityId, KgPair};
use crate::reasoning::{
    update_entity_probs, update_subrel_probs, AlignmentState, ReasoningConfig, ReasoningError,
};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Produced by an annotator backend (or by the caller).
    Annotated,
    /// Added by the final augmentation step of refinement.
    Inferred,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PseudoLabel {
    pub source: EntityId,
    pub target: EntityId,
    pub provenance: Provenance,
}

/// A deduplicated set of `(source, target)` labels in sorted order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PseudoLabelSet {
    inner: BTreeMap<(EntityId, EntityId), Provenance>,
}

impl PseudoLabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (EntityId, EntityId)>) -> Self {
        let mut set = Self::new();
        for (s, t) in pairs {
            set.insert(s, t, Provenance::Annotated);
        }
        set
    }

    /// Inserts a label; an existing annotated entry is never downgraded to
    /// inferred. Returns true when the pair was new.
    pub fn insert(&mut self, source: EntityId, target: EntityId, provenance: Provenance) -> bool {
        match self.inner.get_mut(&(source, target)) {
            Some(existing) => {
                if provenance == Provenance::Annotated {
                    *existing = Provenance::Annotated;
                }
                false
            }
            None => {
                self.inner.insert((source, target), provenance);
                true
            }
        }
    }

    pub fn extend(&mut self, other: &PseudoLabelSet) {
        for label in other.iter() {
            self.insert(label.source, label.target, label.provenance);
        }
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn contains(&self, source: EntityId, target: EntityId) -> bool {
        self.inner.contains_key(&(source, target))
    }

    pub fn iter(&self) -> impl Iterator<Item = PseudoLabel> + '_ {
        self.inner
            .iter()
            .map(|(&(source, target), &provenance)| PseudoLabel {
                source,
                target,
                provenance,
            })
    }

    pub fn pairs(&self) -> impl Iterator<Item = (EntityId, EntityId)> + '_ {
        self.inner.keys().copied()
    }

    pub fn sources(&self) -> BTreeSet<EntityId> {
        self.inner.keys().map(|&(s, _)| s).collect()
    }

    /// Members whose provenance is [`Provenance::Annotated`].
    pub fn annotated(&self) -> PseudoLabelSet {
        let mut out = PseudoLabelSet::new();
        for l in self
            .iter()
            .filter(|l| l.provenance == Provenance::Annotated)
        {
            out.insert(l.source, l.target, l.provenance);
        }
        out
    }

    /// Fraction of labels present in the ground truth; `None` when empty.
    pub fn tpr(&self, truth: &crate::kg::GroundTruth) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let correct = self.pairs().filter(|&(s, t)| truth.contains(s, t)).count();
        Some(correct as f64 / self.len() as f64)
    }

    /// `source_id\ttarget_id\tprovenance` lines.
    pub fn write_tsv(&self, out: &mut impl Write) -> std::io::Result<()> {
        for l in self.iter() {
            let prov = match l.provenance {
                Provenance::Annotated => "annotated",
                Provenance::Inferred => "inferred",
            };
            writeln!(out, "{}\t{}\t{}", l.source, l.target, prov)?;
        }
        Ok(())
    }

    /// Parses `source_id\ttarget_id` lines with an optional provenance third
    /// column.
    pub fn read_tsv(input: impl BufRead) -> Result<Self, LabelIoError> {
        let mut set = PseudoLabelSet::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 && fields.len() != 3 {
                return Err(LabelIoError::Malformed {
                    line: lineno + 1,
                    reason: format!("expected 2 or 3 fields, got {}", fields.len()),
                });
            }
            let parse_id = |s: &str| {
                s.parse::<u32>().map_err(|_| LabelIoError::Malformed {
                    line: lineno + 1,
                    reason: format!("not an entity id: {s}"),
                })
            };
            let source = EntityId(parse_id(fields[0])?);
            let target = EntityId(parse_id(fields[1])?);
            let provenance = match fields.get(2) {
                None | Some(&"annotated") => Provenance::Annotated,
                Some(&"inferred") => Provenance::Inferred,
                Some(other) => {
                    return Err(LabelIoError::Malformed {
                        line: lineno + 1,
                        reason: format!("unknown provenance: {other}"),
                    })
                }
            };
            set.insert(source, target, provenance);
        }
        Ok(set)
    }
}

#[derive(Debug, Error)]
pub enum LabelIoError {
    #[error("labels file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Refinement parameters. Defaults follow the standard setup:
/// `delta0 = 0.5`, `delta1 = 0.9`, ten reasoning iterations.
#[derive(Clone, Copy, Debug)]
pub struct RefinerConfig {
    /// Initialization probability for seeded labels.
    pub delta0: f64,
    /// Elevation threshold for retained labels.
    pub delta1: f64,
    /// Refinement iterations.
    pub n_lr: usize,
    /// Sparse-map pruning threshold handed to the reasoning rounds.
    pub theta_min: f64,
    /// Include stored pairs above `delta1` in the returned set, tagged
    /// inferred when they were not part of the input.
    pub augment_inferred: bool,
    /// Admit seeds sitting exactly at `delta0` in the first iteration.
    /// Without this, evidence-free labels can never enter the retained set
    /// because admission is strict.
    pub seed_admit: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            delta0: 0.5,
            delta1: 0.9,
            n_lr: 10,
            theta_min: 1e-4,
            augment_inferred: true,
            seed_admit: true,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.delta0 > 0.0 && self.delta0 < self.delta1 && self.delta1 < 1.0) {
            return Err(RefineError::InvalidConfig(format!(
                "need 0 < delta0 < delta1 < 1, got delta0={} delta1={}",
                self.delta0, self.delta1
            )));
        }
        if self.n_lr == 0 {
            return Err(RefineError::InvalidConfig("n_lr must be >= 1".to_string()));
        }
        Ok(())
    }

    fn reasoning(&self) -> ReasoningConfig {
        ReasoningConfig {
            iterations: self.n_lr,
            theta_min: self.theta_min,
        }
    }
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refiner config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
}

/// Per-iteration telemetry of a refinement run.
#[derive(Clone, Debug, Default)]
pub struct RefinerTrace {
    rows: Vec<TraceRow>,
    /// Retained label set after each iteration's adjustment.
    retained: Vec<Vec<(EntityId, EntityId)>>,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub size_lprime: usize,
    /// `|A ∩ L'| / |L'|`; absent while the retained set is empty.
    pub tpr: Option<f64>,
    /// `|A ∩ L'| / |A ∩ L|`; absent when no input label is correct.
    pub recall: Option<f64>,
    /// Incompatibility of the retained set under the end-of-iteration state.
    pub phi: u64,
}

impl RefinerTrace {
    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn retained_at(&self, iter: usize) -> Option<&[(EntityId, EntityId)]> {
        self.retained.get(iter.checked_sub(1)?).map(Vec::as_slice)
    }

    /// One CSV row per iteration: `iter,size_lprime,tpr,recall,phi`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "iter,size_lprime,tpr,recall,phi")?;
        for r in &self.rows {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                r.iter,
                r.size_lprime,
                fmt(r.tpr),
                fmt(r.recall),
                r.phi
            )?;
        }
        Ok(())
    }
}

/// Recomputes per-iteration `(TPR, recall)` for a trace against an arbitrary
/// ground truth. TPR is absent for iterations where the retained set was
/// empty; recall is absent when no input label is correct.
pub fn trace_against_truth(
    trace: &RefinerTrace,
    labels: &PseudoLabelSet,
    truth: &crate::kg::GroundTruth,
) -> Vec<(Option<f64>, Option<f64>)> {
    let correct_in_labels = labels
        .pairs()
        .filter(|&(s, t)| truth.contains(s, t))
        .count();
    trace
        .retained
        .iter()
        .map(|set| {
            let correct = set.iter().filter(|&&(s, t)| truth.contains(s, t)).count();
            let tpr = if set.is_empty() {
                None
            } else {
                Some(correct as f64 / set.len() as f64)
            };
            let recall = if correct_in_labels == 0 {
                None
            } else {
                Some(correct as f64 / correct_in_labels as f64)
            };
            (tpr, recall)
        })
        .collect()
}

/// Overall incompatibility of a label set under `state`: for each label, one
/// count when its probability is strictly below the best stored probability
/// of its target, and one when strictly below the best of its source. Ties
/// are compatible.
pub fn incompatibility(labels: &PseudoLabelSet, state: &AlignmentState) -> u64 {
    incompatibility_of_pairs(labels.pairs(), state)
}

pub(crate) fn incompatibility_of_pairs(
    pairs: impl Iterator<Item = (EntityId, EntityId)>,
    state: &AlignmentState,
) -> u64 {
    let row_max = state.source_prob_index();
    let col_max = state.target_prob_index();
    pairs
        .map(|(s, t)| {
            let p = state.pair_prob(s, t);
            let rm = row_max.get(&s).copied().unwrap_or(0.0);
            let cm = col_max.get(&t).copied().unwrap_or(0.0);
            u64::from(p < cm) + u64::from(p < rm)
        })
        .sum()
}

pub struct RefineOutcome {
    /// The returned set `L* = L' ∪ {stored pairs above delta1}`.
    pub refined: PseudoLabelSet,
    /// The final retained set `L'` alone — the greedy search result before
    /// the augmentation step.
    pub retained: PseudoLabelSet,
    pub state: AlignmentState,
    pub trace: RefinerTrace,
}

/// Greedy label refinement. Deterministic given identical inputs and config.
pub fn refine(
    labels: &PseudoLabelSet,
    pair: &KgPair,
    cfg: &RefinerConfig,
) -> Result<RefineOutcome, RefineError> {
    cfg.validate()?;
    let rcfg = cfg.reasoning();
    let truth = pair.ground_truth.as_ref();
    let correct_in_labels = truth
        .map(|gt| labels.pairs().filter(|&(s, t)| gt.contains(s, t)).count())
        .unwrap_or(0);

    let mut state = AlignmentState::new();
    state.seed_pairs(pair, labels.pairs(), cfg.delta0)?;

    let mut retained: BTreeSet<(EntityId, EntityId)> = BTreeSet::new();
    let mut trace = RefinerTrace::default();

    for iteration in 1..=cfg.n_lr {
        state = update_entity_probs(&state, pair, &rcfg);
        state = update_subrel_probs(&state, pair, &rcfg);

        // Admission: strictly above delta0; seeds at exactly delta0 are let
        // in on the first pass when seed_admit is on.
        for (s, t) in labels.pairs() {
            let p = state.pair_prob(s, t);
            if p > cfg.delta0 || (iteration == 1 && cfg.seed_admit && p >= cfg.delta0) {
                retained.insert((s, t));
            }
        }

        // Removal: strictly below the best stored probability on either side.
        let row_max = state.source_prob_index();
        let col_max = state.target_prob_index();
        retained.retain(|&(s, t)| {
            let p = state.pair_prob(s, t);
            let rm = row_max.get(&s).copied().unwrap_or(0.0);
            let cm = col_max.get(&t).copied().unwrap_or(0.0);
            p >= rm.max(cm)
        });

        // Elevation of the survivors to at least delta1.
        state.seed_pairs(pair, retained.iter().copied(), cfg.delta1)?;

        let correct = truth
            .map(|gt| retained.iter().filter(|&&(s, t)| gt.contains(s, t)).count())
            .unwrap_or(0);
        trace.rows.push(TraceRow {
            iter: iteration,
            size_lprime: retained.len(),
            tpr: match (truth, retained.is_empty()) {
                (Some(_), false) => Some(correct as f64 / retained.len() as f64),
                _ => None,
            },
            recall: match (truth, correct_in_labels) {
                (Some(_), n) if n > 0 => Some(correct as f64 / n as f64),
                _ => None,
            },
            phi: incompatibility_of_pairs(retained.iter().copied(), &state),
        });
        trace.retained.push(retained.iter().copied().collect());
    }

    let mut refined = PseudoLabelSet::new();
    for &(s, t) in &retained {
        refined.insert(s, t, Provenance::Annotated);
    }
    let retained_set = refined.clone();
    if cfg.augment_inferred {
        for (s, t, p) in state.stored_pairs() {
            if p > cfg.delta1 {
                let provenance = if labels.contains(s, t) {
                    Provenance::Annotated
                } else {
                    Provenance::Inferred
                };
                refined.insert(s, t, provenance);
            }
        }
    }

    Ok(RefineOutcome {
        refined,
        retained: retained_set,
        state,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Entity, GroundTruth, KgOptions, KnowledgeGraph, Relation, RelationId, Triple};

    fn chain_pair(n: u32, conflict: bool) -> (KgPair, PseudoLabelSet) {
        let build = |prefix: &str| {
            let (g, _) = KnowledgeGraph::build(
                (0..n)
                    .map(|i| Entity {
                        uri: format!("{prefix}{i}"),
                        name: format!("{prefix}{i}"),
                    })
                    .collect(),
                vec![Relation {
                    uri: format!("{prefix}r"),
                    name: format!("{prefix}r"),
                    inverse_of: None,
                    reversed: false,
                }],
                (0..n - 1)
                    .map(|i| Triple::new(EntityId(i), RelationId(0), EntityId(i + 1)))
                    .collect(),
                KgOptions::default(),
            )
            .unwrap();
            g
        };
        let truth = GroundTruth::new((0..n).map(|i| (EntityId(i), EntityId(i))).collect()).unwrap();
        let pair = KgPair::new(build("a"), build("b"), Some(truth)).unwrap();
        let mut labels = PseudoLabelSet::new();
        for i in 0..3 {
            labels.insert(EntityId(i), EntityId(i), Provenance::Annotated);
        }
        if conflict {
            // A second source mapped onto the already-labeled target 0.
            labels.insert(EntityId(3), EntityId(0), Provenance::Annotated);
        }
        (pair, labels)
    }

    #[test]
    fn empty_labels_refine_to_empty() {
        let (pair, _) = chain_pair(4, false);
        let out = refine(&PseudoLabelSet::new(), &pair, &RefinerConfig::default()).unwrap();
        assert!(out.refined.is_empty());
        assert_eq!(out.state.stored_pairs().len(), 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let (pair, labels) = chain_pair(4, false);
        let cfg = RefinerConfig {
            delta0: 0.9,
            delta1: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            refine(&labels, &pair, &cfg),
            Err(RefineError::InvalidConfig(_))
        ));
    }

    #[test]
    fn chain_conflict_is_removed_and_phi_zero() {
        let (pair, labels) = chain_pair(4, true);
        let out = refine(&labels, &pair, &RefinerConfig::default()).unwrap();

        let annotated: Vec<_> = out.refined.annotated().pairs().collect();
        assert!(!annotated.contains(&(EntityId(3), EntityId(0))));
        for i in 0..3 {
            assert!(annotated.contains(&(EntityId(i), EntityId(i))));
        }
        assert_eq!(incompatibility(&out.refined, &out.state), 0);

        // Final-iteration trace: all retained labels correct, full recall.
        let last = out.trace.rows().last().unwrap();
        assert_eq!(last.tpr, Some(1.0));
        assert_eq!(last.recall, Some(1.0));
    }

    #[test]
    fn refined_annotated_labels_come_from_input() {
        let (pair, labels) = chain_pair(4, true);
        let out = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
        for l in out.refined.iter() {
            if l.provenance == Provenance::Annotated {
                assert!(labels.contains(l.source, l.target));
            }
        }
    }

    #[test]
    fn augmentation_can_infer_unlabeled_pairs() {
        let (pair, labels) = chain_pair(4, false);
        let out = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
        // Entity 3 was never labeled; the chain structure infers it.
        assert!(out
            .refined
            .iter()
            .any(|l| l.provenance == Provenance::Inferred && l.source == EntityId(3)));

        let cfg = RefinerConfig {
            augment_inferred: false,
            ..Default::default()
        };
        let out2 = refine(&labels, &pair, &cfg).unwrap();
        assert!(out2
            .refined
            .iter()
            .all(|l| l.provenance == Provenance::Annotated));
    }

    #[test]
    fn isolated_labels_pass_through_with_input_tpr() {
        // No triples at all: no evidence to add or remove anything.
        let build = |prefix: &str| {
            let (g, _) = KnowledgeGraph::build(
                (0..4)
                    .map(|i| Entity {
                        uri: format!("{prefix}{i}"),
                        name: format!("{prefix}{i}"),
                    })
                    .collect(),
                vec![],
                vec![],
                KgOptions::default(),
            )
            .unwrap();
            g
        };
        let truth = GroundTruth::new((0..4).map(|i| (EntityId(i), EntityId(i))).collect()).unwrap();
        let pair = KgPair::new(build("a"), build("b"), Some(truth)).unwrap();
        let mut labels = PseudoLabelSet::new();
        labels.insert(EntityId(0), EntityId(0), Provenance::Annotated); // correct
        labels.insert(EntityId(1), EntityId(2), Provenance::Annotated); // wrong
        let out = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
        assert_eq!(out.refined, labels);
        assert_eq!(out.trace.rows().last().unwrap().tpr, Some(0.5));
    }

    #[test]
    fn refine_is_idempotent_on_its_annotated_output() {
        let (pair, labels) = chain_pair(4, true);
        let cfg = RefinerConfig::default();
        let first = refine(&labels, &pair, &cfg).unwrap();
        let again = refine(&first.refined.annotated(), &pair, &cfg).unwrap();
        assert_eq!(
            again.refined.annotated().pairs().collect::<Vec<_>>(),
            first.refined.annotated().pairs().collect::<Vec<_>>()
        );
    }

    #[test]
    fn refine_is_deterministic() {
        let (pair, labels) = chain_pair(4, true);
        let a = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
        let b = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
        assert_eq!(a.refined, b.refined);
        assert_eq!(a.state, b.state);
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        a.trace.write_csv(&mut csv_a).unwrap();
        b.trace.write_csv(&mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn incompatibility_counts_strictly_dominated_sides() {
        let (pair, _) = chain_pair(4, false);
        let mut state = AlignmentState::new();
        state
            .seed_pairs(&pair, [(EntityId(0), EntityId(2))], 0.5)
            .unwrap();
        state
            .seed_pairs(&pair, [(EntityId(1), EntityId(2))], 0.9)
            .unwrap();
        let labels =
            PseudoLabelSet::from_pairs([(EntityId(0), EntityId(2)), (EntityId(1), EntityId(2))]);
        assert_eq!(incompatibility(&labels, &state), 1);
        assert_eq!(incompatibility(&PseudoLabelSet::new(), &state), 0);
    }

    #[test]
    fn single_stored_label_is_compatible() {
        let (pair, _) = chain_pair(4, false);
        let mut state = AlignmentState::new();
        state
            .seed_pairs(&pair, [(EntityId(0), EntityId(0))], 0.5)
            .unwrap();
        let labels = PseudoLabelSet::from_pairs([(EntityId(0), EntityId(0))]);
        assert_eq!(incompatibility(&labels, &state), 0);
    }

    #[test]
    fn mutual_max_property_holds_for_survivors() {
        let (pair, labels) = chain_pair(4, true);
        let out = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
        let row_max = out.state.source_prob_index();
        let col_max = out.state.target_prob_index();
        for l in out.refined.annotated().iter() {
            let p = out.state.pair_prob(l.source, l.target);
            assert!(p >= row_max[&l.source]);
            assert!(p >= col_max[&l.target]);
        }
    }

    #[test]
    fn trace_recomputes_against_arbitrary_truth() {
        let (pair, labels) = chain_pair(4, true);
        let out = refine(&labels, &pair, &RefinerConfig::default()).unwrap();
        let truth = pair.ground_truth.as_ref().unwrap();
        let rows = trace_against_truth(&out.trace, &labels, truth);
        assert_eq!(rows.len(), out.trace.rows().len());
        for (got, row) in rows.iter().zip(out.trace.rows()) {
            assert_eq!(got.0, row.tpr);
            assert_eq!(got.1, row.recall);
        }
        assert_eq!(rows.last().unwrap(), &(Some(1.0), Some(1.0)));

        // Against an empty-overlap truth, recall is absent and TPR zero.
        let other = crate::kg::GroundTruth::new(vec![(EntityId(0), EntityId(3))]).unwrap();
        let rows = trace_against_truth(&out.trace, &labels, &other);
        for (tpr, recall) in rows {
            assert_eq!(recall, None);
            if let Some(t) = tpr {
                assert_eq!(t, 0.0);
            }
        }
    }

    #[test]
    fn labels_tsv_roundtrip() {
        let mut labels = PseudoLabelSet::new();
        labels.insert(EntityId(3), EntityId(1), Provenance::Annotated);
        labels.insert(EntityId(0), EntityId(2), Provenance::Inferred);
        let mut buf = Vec::new();
        labels.write_tsv(&mut buf).unwrap();
        let back = PseudoLabelSet::read_tsv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, labels);

        let bad = PseudoLabelSet::read_tsv(std::io::Cursor::new(b"1\n".to_vec()));
        assert!(matches!(bad, Err(LabelIoError::Malformed { line: 1, .. })));
    }
}
