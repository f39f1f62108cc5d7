//! Synthetic benchmark pairs: a random directed multigraph and an isomorphic
//! copy with edge dropout, bijectively renamed relations, and perturbed
//! entity names. Ground truth is the identity bijection.

use super::PipelineError;
use crate::kg::{
    Entity, EntityId, GroundTruth, KgOptions, KgPair, KnowledgeGraph, Relation, RelationId, Triple,
};
use crate::refine::{Provenance, PseudoLabelSet};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct SynthSpec {
    pub entity_count: usize,
    pub relation_count: usize,
    pub mean_degree: f64,
    pub edge_dropout: f64,
    pub name_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            entity_count: 500,
            relation_count: 10,
            mean_degree: 8.0,
            edge_dropout: 0.1,
            name_noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.entity_count == 0 || self.relation_count == 0 || self.mean_degree <= 0.0 {
            return Err(PipelineError::Config(
                "synth spec needs positive entity/relation counts and mean degree".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.edge_dropout) || !(0.0..1.0).contains(&self.name_noise) {
            return Err(PipelineError::Config(
                "synth dropout and name noise must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SynthReport {
    /// More than half the entities ended up isolated on some side.
    pub isolated_majority: bool,
}

fn random_word(rng: &mut impl Rng, len: usize) -> String {
    (0..len)
        .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
        .collect()
}

fn unique_words(rng: &mut impl Rng, count: usize, len: usize) -> Vec<String> {
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w = random_word(rng, len);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Substitutes one or more characters; the result differs from every name in
/// `taken`, so perturbed names never collide.
fn perturb_name(name: &str, taken: &HashSet<String>, rng: &mut impl Rng) -> String {
    loop {
        let mut chars: Vec<char> = name.chars().collect();
        let subs = 1 + rng.gen_range(0..2);
        for _ in 0..subs {
            let pos = rng.gen_range(0..chars.len());
            chars[pos] = (b'a' + rng.gen_range(0..26u8)) as char;
        }
        let candidate: String = chars.into_iter().collect();
        if candidate != name && !taken.contains(&candidate) {
            return candidate;
        }
    }
}

/// Samples a pair per `spec`. The same spec always yields the same pair.
pub fn synth_pair(
    spec: &SynthSpec,
    options: KgOptions,
) -> Result<(KgPair, SynthReport), PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.entity_count;

    let src_names = unique_words(&mut rng, n, 8);
    let rel_names = unique_words(&mut rng, spec.relation_count, 5);

    // Distinct triples at roughly mean_degree total degree per entity.
    let triple_target = ((n as f64 * spec.mean_degree / 2.0).round() as usize).max(1);
    let mut triples = Vec::with_capacity(triple_target);
    let mut seen = HashSet::with_capacity(triple_target);
    let mut attempts = 0usize;
    while triples.len() < triple_target && attempts < triple_target * 50 {
        attempts += 1;
        let head = rng.gen_range(0..n) as u32;
        let mut tail = rng.gen_range(0..n) as u32;
        if n > 1 {
            while tail == head {
                tail = rng.gen_range(0..n) as u32;
            }
        }
        let rel = rng.gen_range(0..spec.relation_count) as u32;
        if seen.insert((head, rel, tail)) {
            triples.push(Triple::new(EntityId(head), RelationId(rel), EntityId(tail)));
        }
    }

    // Target side: perturbed names, renamed relations, dropped edges.
    let noise_count = (spec.name_noise * n as f64).round() as usize;
    let mut noisy: HashSet<usize> = HashSet::new();
    let noise_picks = crate::annotate::sample_indices(n, noise_count, &mut rng);
    noisy.extend(noise_picks);
    let mut taken: HashSet<String> = src_names.iter().cloned().collect();
    let tgt_names: Vec<String> = src_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            if noisy.contains(&i) {
                let p = perturb_name(name, &taken, &mut rng);
                taken.insert(p.clone());
                p
            } else {
                name.clone()
            }
        })
        .collect();
    let tgt_rel_names: Vec<String> = rel_names.iter().map(|r| format!("{r}x")).collect();
    let tgt_triples: Vec<Triple> = triples
        .iter()
        .filter(|_| rng.gen::<f64>() >= spec.edge_dropout)
        .copied()
        .collect();

    let build = |names: &[String], rels: &[String], trips: Vec<Triple>| {
        KnowledgeGraph::build(
            names
                .iter()
                .map(|w| Entity {
                    uri: w.clone(),
                    name: w.clone(),
                })
                .collect(),
            rels.iter()
                .map(|w| Relation {
                    uri: w.clone(),
                    name: w.clone(),
                    inverse_of: None,
                    reversed: false,
                })
                .collect(),
            trips,
            options,
        )
    };
    let (source, _) = build(&src_names, &rel_names, triples)?;
    let (target, _) = build(&tgt_names, &tgt_rel_names, tgt_triples)?;

    let isolated = |kg: &KnowledgeGraph| {
        kg.entity_ids()
            .filter(|&e| kg.degree(e) == 0 && kg.neighbors_in(e).unwrap().is_empty())
            .count()
    };
    let report = SynthReport {
        isolated_majority: isolated(&source) * 2 > n || isolated(&target) * 2 > n,
    };

    let truth = GroundTruth::new((0..n as u32).map(|i| (EntityId(i), EntityId(i))).collect())
        .expect("identity truth is consistent");
    Ok((KgPair::new(source, target, Some(truth))?, report))
}

/// Fixed-budget label synthesis: `count` distinct source entities, a
/// `tpr` fraction labeled with their true counterpart and the rest with a
/// uniformly random wrong target.
pub fn synth_noisy_labels(pair: &KgPair, count: usize, tpr: f64, seed: u64) -> PseudoLabelSet {
    let truth = pair
        .ground_truth
        .as_ref()
        .expect("labels need ground truth");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<EntityId> = truth.pairs().iter().map(|&(s, _)| s).collect();
    let count = count.min(sources.len());
    let picks = crate::annotate::sample_indices(sources.len(), count, &mut rng);
    let true_count = (tpr * count as f64).round() as usize;

    let m = pair.target.entity_count();
    let mut labels = PseudoLabelSet::new();
    for (i, &idx) in picks.iter().enumerate() {
        let s = sources[idx];
        let t_true = truth.target_of(s).expect("picked from truth");
        let t = if i < true_count {
            t_true
        } else {
            let mut wrong = EntityId(rng.gen_range(0..m) as u32);
            while wrong == t_true && m > 1 {
                wrong = EntityId(rng.gen_range(0..m) as u32);
            }
            wrong
        };
        labels.insert(s, t, Provenance::Annotated);
    }
    labels
}

/// Fixed-true-positive scheme: the number of correct labels stays constant
/// while the total label count scales with `1 / tpr`.
pub fn synth_noisy_labels_fixed_tp(
    pair: &KgPair,
    true_positives: usize,
    tpr: f64,
    seed: u64,
) -> PseudoLabelSet {
    let count = (true_positives as f64 / tpr.max(f64::MIN_POSITIVE)).round() as usize;
    synth_noisy_labels(pair, count, tpr, seed)
}
