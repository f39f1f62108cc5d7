//! Cross-module invariants, property-tested where randomized inputs pull
//! their weight and spot-checked otherwise.

use kgalign::kg::{
    Entity, EntityId, GroundTruth, KgOptions, KgPair, KnowledgeGraph, Relation, RelationId, Triple,
};
use kgalign::matcher::{evaluate, train, MatcherConfig};
use kgalign::pipeline::{run, synth_pair, DataSource, RunConfig, SynthSpec};
use kgalign::reasoning::{
    entity_pair_probability, update_entity_probs, update_subrel_probs, AlignmentState,
    ReasoningConfig,
};
use kgalign::refine::PseudoLabelSet;
use kgalign::select::{aggregate, degree_scores, select_by_score};
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use std::collections::BTreeSet;

fn build_graph(
    prefix: &str,
    n: usize,
    rels: usize,
    triples: Vec<(u32, u32, u32)>,
    reverse: bool,
) -> KnowledgeGraph {
    let (g, _) = KnowledgeGraph::build(
        (0..n)
            .map(|i| Entity {
                uri: format!("{prefix}{i}"),
                name: format!("{prefix}{i}"),
            })
            .collect(),
        (0..rels)
            .map(|i| Relation {
                uri: format!("{prefix}r{i}"),
                name: format!("{prefix}r{i}"),
                inverse_of: None,
                reversed: false,
            })
            .collect(),
        triples
            .into_iter()
            .map(|(h, r, t)| Triple::new(EntityId(h), RelationId(r), EntityId(t)))
            .collect(),
        KgOptions {
            reverse_relations: reverse,
        },
    )
    .unwrap();
    g
}

fn arb_triples(n: u32, rels: u32, count: usize) -> impl Strategy<Value = Vec<(u32, u32, u32)>> {
    prop::collection::vec((0..n, 0..rels, 0..n), 1..count)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Functionality caches agree with a from-scratch recount, and the
    /// per-relation triple lists partition the triple set.
    #[test]
    fn functionality_cache_matches_recount(
        triples in arb_triples(12, 4, 60),
        reverse in any::<bool>(),
    ) {
        let kg = build_graph("p", 12, 4, triples, reverse);
        let mut total = 0usize;
        for r in kg.relation_ids() {
            let pairs = kg.relation_pairs(r);
            total += pairs.len();
            if pairs.is_empty() {
                prop_assert!(kg.functionality(r).is_err());
                continue;
            }
            let heads: BTreeSet<u32> = pairs.iter().map(|(h, _)| h.0).collect();
            let tails: BTreeSet<u32> = pairs.iter().map(|(_, t)| t.0).collect();
            let f = kg.functionality(r).unwrap();
            let inv = kg.inverse_functionality(r).unwrap();
            prop_assert_eq!(f, heads.len() as f64 / pairs.len() as f64);
            prop_assert_eq!(inv, tails.len() as f64 / pairs.len() as f64);
            prop_assert!((0.0..=1.0).contains(&f) && (0.0..=1.0).contains(&inv));
        }
        prop_assert_eq!(total, kg.triple_count());
    }

    /// All stored probabilities stay inside (0, 1] through repeated rounds.
    #[test]
    fn probabilities_stay_in_unit_interval(
        spec_seed in 0u64..500,
        seed_count in 1usize..8,
        rounds in 1usize..4,
    ) {
        let spec = SynthSpec {
            entity_count: 16,
            relation_count: 2,
            mean_degree: 4.0,
            edge_dropout: 0.1,
            name_noise: 0.0,
            seed: spec_seed,
        };
        let (pair, _) = synth_pair(&spec, KgOptions::default()).unwrap();
        let mut st = AlignmentState::new();
        let seeds: Vec<(EntityId, EntityId)> = (0..seed_count)
            .map(|i| (EntityId((i * 2 % 16) as u32), EntityId((i * 3 % 16) as u32)))
            .collect();
        st.seed_pairs(&pair, seeds, 0.5).unwrap();
        let cfg = ReasoningConfig { iterations: 1, theta_min: 0.0 };
        for _ in 0..rounds {
            st = update_entity_probs(&st, &pair, &cfg);
            st = update_subrel_probs(&st, &pair, &cfg);
        }
        for (_, _, p) in st.stored_pairs() {
            prop_assert!(p > 0.0 && p <= 1.0, "stored probability {p}");
        }
    }

    /// Adding one more matched neighbor pair with nonzero contribution never
    /// decreases the aggregated pair probability.
    #[test]
    fn evidence_is_monotone(
        k in 1usize..6,
        probs in prop::collection::vec(0.05f64..0.95, 6),
        subrel in 0.05f64..1.0,
    ) {
        // h has k (then k+1) outgoing triples to tails aligned with their
        // counterparts at the given probabilities.
        let q_with = |count: usize| {
            let n = count + 1;
            let triples: Vec<(u32, u32, u32)> =
                (0..count).map(|i| (0, 0, (i + 1) as u32)).collect();
            let src = build_graph("s", n + 1, 1, triples.clone(), false);
            let tgt = build_graph("t", n + 1, 1, triples, false);
            let pair = KgPair::new(src, tgt, None).unwrap();
            let mut st = AlignmentState::new();
            for (i, &p0) in probs.iter().take(count).enumerate() {
                let e = EntityId((i + 1) as u32);
                st.seed_pairs(&pair, [(e, e)], p0).unwrap();
            }
            st.set_subrel_fwd(RelationId(0), RelationId(0), subrel);
            st.set_subrel_bwd(RelationId(0), RelationId(0), subrel);
            entity_pair_probability(&st, &pair, EntityId(0), EntityId(0))
        };
        let smaller = q_with(k);
        let larger = q_with(k + 1);
        prop_assert!(larger >= smaller - 1e-12, "{larger} < {smaller}");
    }

    /// Any strictly increasing transform of one score vector leaves the
    /// aggregated selection order unchanged. Scores are dyadic rationals and
    /// the transform uses power-of-two factors, so it is exact and ties are
    /// preserved exactly.
    #[test]
    fn selection_is_scale_invariant(
        ur_raw in prop::collection::vec(0u32..10_000, 8),
        un_raw in prop::collection::vec(0u32..10_000, 8),
        scale_pow in -3i32..6,
        shift in 0u32..8,
    ) {
        let ur: Vec<f64> = ur_raw.iter().map(|&v| v as f64 / 8.0).collect();
        let un: Vec<f64> = un_raw.iter().map(|&v| v as f64 / 8.0).collect();
        let scale = (2.0f64).powi(scale_pow);
        let pool: Vec<EntityId> = (0..8).map(EntityId).collect();
        let base = aggregate(&pool, &ur, &un);
        let transformed: Vec<f64> = ur.iter().map(|v| v * scale + shift as f64).collect();
        let after = aggregate(&pool, &transformed, &un);
        let order = |s: &kgalign::select::UncertaintyScores| {
            s.entries().iter().map(|e| e.entity).collect::<Vec<_>>()
        };
        prop_assert_eq!(order(&base), order(&after));
        for (a, b) in base.entries().iter().zip(after.entries()) {
            prop_assert_eq!(a.u, b.u);
            prop_assert!(a.u > 0.0 && a.u <= 4.0);
        }
    }

    /// Ranking metrics on arbitrary matchers respect their ordering bounds.
    #[test]
    fn eval_report_bounds_hold(
        spec_seed in 0u64..200,
        train_seed in 0u64..50,
    ) {
        let spec = SynthSpec {
            entity_count: 12,
            relation_count: 2,
            mean_degree: 4.0,
            edge_dropout: 0.0,
            name_noise: 0.0,
            seed: spec_seed,
        };
        let (pair, _) = synth_pair(&spec, KgOptions::default()).unwrap();
        let labels = PseudoLabelSet::from_pairs((0..3).map(|i| (EntityId(i), EntityId(i))));
        let cfg = MatcherConfig { epochs: 3, seed: train_seed, ..Default::default() };
        let matcher = train(&cfg, &pair, &labels).unwrap();
        let truth = pair.ground_truth.as_ref().unwrap();
        let r = evaluate(&matcher, truth).unwrap();
        prop_assert!(r.hit1 <= r.hit10);
        prop_assert!(r.hit1 <= r.mrr && r.mrr <= 1.0);

        // Mutual-top-1 pairs are injective in both coordinates.
        let confident = matcher.confident_pairs();
        let sources: BTreeSet<_> = confident.iter().map(|&(s, _)| s).collect();
        let targets: BTreeSet<_> = confident.iter().map(|&(_, t)| t).collect();
        prop_assert_eq!(sources.len(), confident.len());
        prop_assert_eq!(targets.len(), confident.len());
    }
}

/// Swapping source and target and transposing the seeds transposes the
/// reasoning state, within floating-point reordering tolerance.
#[test]
fn reversed_symmetry_transposes_the_state() {
    for spec_seed in [3u64, 17, 40] {
        let spec = SynthSpec {
            entity_count: 24,
            relation_count: 3,
            mean_degree: 5.0,
            edge_dropout: 0.15,
            name_noise: 0.0,
            seed: spec_seed,
        };
        let (pair, _) = synth_pair(&spec, KgOptions::default()).unwrap();
        let seeds: Vec<(EntityId, EntityId)> = (0..8).map(|i| (EntityId(i), EntityId(i))).collect();
        let run_rounds = |pair: &KgPair, seeds: &[(EntityId, EntityId)]| {
            let mut st = AlignmentState::new();
            st.seed_pairs(pair, seeds.iter().copied(), 0.5).unwrap();
            let cfg = ReasoningConfig {
                iterations: 1,
                theta_min: 0.0,
            };
            for _ in 0..4 {
                st = update_entity_probs(&st, pair, &cfg);
                st = update_subrel_probs(&st, pair, &cfg);
            }
            st
        };
        let forward = run_rounds(&pair, &seeds);

        let (pair2, _) = synth_pair(&spec, KgOptions::default()).unwrap();
        let swapped = pair2.swapped();
        let transposed_seeds: Vec<(EntityId, EntityId)> =
            seeds.iter().map(|&(s, t)| (t, s)).collect();
        let backward = run_rounds(&swapped, &transposed_seeds);

        for e in 0..24u32 {
            for t in 0..24u32 {
                let a = forward.pair_prob(EntityId(e), EntityId(t));
                let b = backward.pair_prob(EntityId(t), EntityId(e));
                assert!(
                    (a - b).abs() <= 1e-9,
                    "seed {spec_seed}: pair ({e},{t}) forward {a} vs transposed {b}"
                );
            }
        }
    }
}

/// Weak report monotonicity on the standard fixture: over three-seed means,
/// Hit@1 at each later iteration is no worse than at the first.
#[test]
fn full_variant_hit1_never_drops_below_first_iteration() {
    let mut first = 0.0;
    let mut later = [0.0f64; 2];
    for seed in [5u64, 6, 7] {
        let cfg = RunConfig {
            data: DataSource::Synth(SynthSpec {
                entity_count: 200,
                seed: 400 + seed,
                ..Default::default()
            }),
            seed,
            backend: kgalign::pipeline::BackendChoice::NoisyOracle { p_true: 0.6 },
            matcher: MatcherConfig {
                epochs: 120,
                ..Default::default()
            },
            ..Default::default()
        };
        let report = run(&cfg).unwrap();
        first += report.iterations[0].hit1.unwrap_or(0.0) / 3.0;
        for (i, slot) in later.iter_mut().enumerate() {
            *slot += report.iterations[i + 1].hit1.unwrap_or(0.0) / 3.0;
        }
    }
    for (i, mean) in later.iter().enumerate() {
        assert!(
            *mean >= first - 1e-12,
            "iteration {} mean hit@1 {mean} below first {first}",
            i + 2
        );
    }
}

/// Matcher quality example: two isomorphic 10-node graphs whose nodes carry
/// unique anchor-subset signatures align from three seed labels.
#[test]
fn tiny_unique_structure_aligns_from_three_labels() {
    let mut hits = Vec::new();
    for seed in [1u64, 2, 3] {
        // Nodes 3..10 each connect to a distinct nonempty subset of the
        // anchors {0,1,2}; subsets shuffled per seed.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
        use rand::Rng;
        let mut subsets: Vec<u32> = (1..8).collect();
        for i in (1..subsets.len()).rev() {
            let j = rng.gen_range(0..=i);
            subsets.swap(i, j);
        }
        let mut triples = Vec::new();
        for (i, mask) in subsets.iter().enumerate() {
            for a in 0..3u32 {
                if mask & (1 << a) != 0 {
                    triples.push(((3 + i) as u32, rng.gen_range(0..2u32), a));
                }
            }
        }
        triples.push((0, 0, 1));
        triples.push((1, 0, 2));

        let pair = KgPair::new(
            build_graph("a", 10, 2, triples.clone(), true),
            build_graph("b", 10, 2, triples, true),
            None,
        )
        .unwrap();
        let labels = PseudoLabelSet::from_pairs((0..3).map(|i| (EntityId(i), EntityId(i))));
        let cfg = MatcherConfig {
            seed,
            ..Default::default()
        };
        let matcher = train(&cfg, &pair, &labels).unwrap();
        let held_out =
            GroundTruth::new((3..10).map(|i| (EntityId(i), EntityId(i))).collect()).unwrap();
        hits.push(evaluate(&matcher, &held_out).unwrap().hit1);
    }
    let mean = hits.iter().sum::<f64>() / 3.0;
    assert!(mean >= 0.8, "held-out hit@1 mean {mean} < 0.8 ({hits:?})");
}

/// The degree-ranking ablation scores a star graph analytically.
#[test]
fn degree_variant_matches_star_closed_form() {
    let star = build_graph(
        "s",
        6,
        1,
        vec![(0, 0, 1), (0, 0, 2), (0, 0, 3), (0, 0, 4), (0, 0, 5)],
        true,
    );
    let pair = KgPair::new(star, build_graph("x", 1, 0, vec![], false), None).unwrap();
    let scores = degree_scores(&pair);
    assert_eq!(scores, vec![6.0, 2.0, 2.0, 2.0, 2.0, 2.0]);
    let pool: Vec<EntityId> = pair.source.entity_ids().collect();
    let picked = select_by_score(&pool, &scores, &BTreeSet::new(), 2);
    assert_eq!(picked, vec![EntityId(0), EntityId(1)]);
}

/// Both iteration-count extremes complete and report under a fixed budget.
#[test]
fn single_and_multi_iteration_runs_complete() {
    for iterations in [1usize, 3] {
        let cfg = RunConfig {
            data: DataSource::Synth(SynthSpec {
                entity_count: 50,
                seed: 8,
                ..Default::default()
            }),
            iterations,
            seed: 2,
            matcher: MatcherConfig {
                epochs: 15,
                ..Default::default()
            },
            ..Default::default()
        };
        let report = run(&cfg).unwrap();
        assert_eq!(report.iterations.len(), iterations);
        assert_eq!(report.total_queries, report.budget);
    }
}
