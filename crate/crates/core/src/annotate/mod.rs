//! Pseudo-label production: candidate filtering, prompt construction,
//! pluggable annotator backends, and budget accounting.
//!
//! One `annotate` call is one query against the budget, charged before the
//! backend runs; an abstained or unparseable reply still spends it. Token
//! totals are tracked alongside and can carry an optional ceiling, but
//! queries are the enforced unit.

mod llm;

pub use llm::{LlmBackend, LlmConfig};

use crate::kg::{EntityId, KgError, KgPair};
use crate::refine::{Provenance, PseudoLabelSet};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("oracle backend requires ground truth on the pair")]
    NoGroundTruth,
    #[error("API key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("transport failure after {attempts} attempts: {cause}")]
    Transport { attempts: u32, cause: String },
    #[error("endpoint rejected the request with status {0}")]
    Rejected(u16),
    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("query budget exhausted ({spent}/{max})")]
    BudgetExhausted { spent: u64, max: u64 },
    #[error("cannot filter candidates against an empty target KG")]
    EmptyTargetKg,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Kg(#[from] KgError),
}

/// Query and token budget with running totals.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct Budget {
    pub max_queries: u64,
    pub max_tokens: Option<u64>,
    pub spent_queries: u64,
    pub spent_tokens: u64,
}

impl Budget {
    pub fn new(max_queries: u64) -> Self {
        Self {
            max_queries,
            max_tokens: None,
            spent_queries: 0,
            spent_tokens: 0,
        }
    }

    pub fn with_token_ceiling(mut self, max_tokens: u64) -> Self {
        self.max_tokens = Some(max_tokens);
        self
    }

    pub fn remaining_queries(&self) -> u64 {
        self.max_queries - self.spent_queries
    }

    /// True when a new query may be issued: queries remain and the token
    /// ceiling, when set, has not been reached. Token spend is only known
    /// after a reply, so the ceiling is checked pre-query.
    pub fn can_query(&self) -> bool {
        self.remaining_queries() > 0 && self.max_tokens.is_none_or(|m| self.spent_tokens < m)
    }

    fn charge_query(&mut self) -> Result<(), AnnotateError> {
        if !self.can_query() {
            return Err(AnnotateError::BudgetExhausted {
                spent: self.spent_queries,
                max: self.max_queries,
            });
        }
        self.spent_queries += 1;
        Ok(())
    }

    fn charge_tokens(&mut self, tokens: u64) {
        self.spent_tokens += tokens;
    }
}

/// Top-k most name-similar target entities for one source entity.
#[derive(Clone, Debug)]
pub struct CandidateList {
    pub source: EntityId,
    /// `(target, similarity)` in descending similarity, ties by ascending id.
    pub candidates: Vec<(EntityId, f64)>,
}

impl CandidateList {
    pub fn contains(&self, target: EntityId) -> bool {
        self.candidates.iter().any(|&(t, _)| t == target)
    }

    pub fn position(&self, target: EntityId) -> Option<usize> {
        self.candidates.iter().position(|&(t, _)| t == target)
    }
}

/// Length-normalized character-level edit similarity on case-folded names:
/// `1 - editdist / max(len_a, len_b)`.
pub fn name_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(&a.to_lowercase(), &b.to_lowercase())
}

/// Scores every target entity against the source's name and keeps the top-k.
pub fn filter_candidates(
    pair: &KgPair,
    source: EntityId,
    k: usize,
) -> Result<CandidateList, AnnotateError> {
    if pair.target.entity_count() == 0 {
        return Err(AnnotateError::EmptyTargetKg);
    }
    pair.source.entity(source)?;
    let name = pair.source.entity_name(source);
    let mut scored: Vec<(EntityId, f64)> = pair
        .target
        .entity_ids()
        .map(|t| (t, name_similarity(name, pair.target.entity_name(t))))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("similarity is finite")
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k.max(1));
    Ok(CandidateList {
        source,
        candidates: scored,
    })
}

/// First `k` positions of a seeded partial Fisher-Yates shuffle of `0..n`.
/// The exact procedure is part of the prompt contract: swap index `i` with a
/// uniform draw from `i..n`, for `i` in `0..k`.
pub fn sample_indices(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Forward triples touching `e`, rendered as `(head, relation, tail)` name
/// tuples; outgoing first, then incoming, each in index order.
fn context_triples(kg: &crate::kg::KnowledgeGraph, e: EntityId) -> Vec<String> {
    let fwd = kg.forward_relation_count();
    let mut out = Vec::new();
    for &(r, t) in kg.out_of(e) {
        if r.index() < fwd {
            out.push(format!(
                "({}, {}, {})",
                kg.entity_name(e),
                kg.relation_name(r),
                kg.entity_name(t)
            ));
        }
    }
    for &(r, h) in kg.in_of(e) {
        if r.index() < fwd {
            out.push(format!(
                "({}, {}, {})",
                kg.entity_name(h),
                kg.relation_name(r),
                kg.entity_name(e)
            ));
        }
    }
    out
}

fn sampled_context(kg: &crate::kg::KnowledgeGraph, e: EntityId, rng: &mut impl Rng) -> Vec<String> {
    let all = context_triples(kg, e);
    sample_indices(all.len(), 3, rng)
        .into_iter()
        .map(|i| all[i].clone())
        .collect()
}

/// Renders the annotation prompt for one source entity: the source name with
/// up to three sampled neighbor triples, the numbered candidates each with up
/// to three sampled triples, and the answer instruction. Byte-identical for
/// a fixed seed.
pub fn build_prompt(
    pair: &KgPair,
    source: EntityId,
    candidates: &CandidateList,
    rng_seed: u64,
) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut p = String::new();
    let _ = writeln!(
        p,
        "Task: decide which candidate from the second knowledge graph refers to \
         the same real-world entity as the source entity from the first knowledge graph."
    );
    let _ = writeln!(p, "\nSource entity: {}", pair.source.entity_name(source));
    let _ = writeln!(p, "Source context triples:");
    for t in sampled_context(&pair.source, source, &mut rng) {
        let _ = writeln!(p, "  {t}");
    }
    let _ = writeln!(p, "\nCandidates:");
    for (i, &(c, _)) in candidates.candidates.iter().enumerate() {
        let _ = writeln!(p, "{}. {}", i + 1, pair.target.entity_name(c));
        for t in sampled_context(&pair.target, c, &mut rng) {
            let _ = writeln!(p, "  {t}");
        }
    }
    let _ = writeln!(
        p,
        "\nAnswer with exactly one candidate number, or the word NONE if no candidate matches."
    );
    p
}

/// One annotation result with its cost.
#[derive(Clone, Debug)]
pub struct Annotation {
    pub source: EntityId,
    pub chosen: Option<EntityId>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub backend: &'static str,
    /// Present when the backend replied but the reply produced no label.
    pub note: Option<String>,
}

/// What a backend returns for one query.
#[derive(Clone, Debug, Default)]
pub struct BackendReply {
    pub chosen: Option<EntityId>,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub note: Option<String>,
}

/// An annotator. `annotate_many` exists so backends with network latency can
/// overlap requests; replies must come back in request order.
pub trait AnnotatorBackend {
    fn tag(&self) -> &'static str;

    fn annotate_one(
        &mut self,
        pair: &KgPair,
        source: EntityId,
        candidates: &CandidateList,
    ) -> Result<BackendReply, BackendError>;

    /// Sequential default; stops at the first failure and returns the
    /// replies gathered before it.
    fn annotate_many(
        &mut self,
        pair: &KgPair,
        requests: &[(EntityId, CandidateList)],
    ) -> (Vec<BackendReply>, Option<BackendError>) {
        let mut replies = Vec::with_capacity(requests.len());
        for (source, cands) in requests {
            match self.annotate_one(pair, *source, cands) {
                Ok(r) => replies.push(r),
                Err(e) => return (replies, Some(e)),
            }
        }
        (replies, None)
    }
}

/// Answers with the ground-truth counterpart iff it survived candidate
/// filtering, otherwise abstains.
pub struct OracleBackend;

impl AnnotatorBackend for OracleBackend {
    fn tag(&self) -> &'static str {
        "oracle"
    }

    fn annotate_one(
        &mut self,
        pair: &KgPair,
        source: EntityId,
        candidates: &CandidateList,
    ) -> Result<BackendReply, BackendError> {
        let gt = pair
            .ground_truth
            .as_ref()
            .ok_or(BackendError::NoGroundTruth)?;
        let chosen = gt.target_of(source).filter(|&t| candidates.contains(t));
        Ok(BackendReply {
            chosen,
            ..Default::default()
        })
    }
}

/// Answers with the truth with probability `p_true`, otherwise with a
/// uniformly random wrong candidate. Abstains when the truth was filtered
/// out, and tells the truth when no wrong candidate exists, so `p_true = 1`
/// reproduces [`OracleBackend`] exactly.
pub struct NoisyOracleBackend {
    p_true: f64,
    rng: ChaCha8Rng,
}

impl NoisyOracleBackend {
    pub fn new(p_true: f64, seed: u64) -> Self {
        Self {
            p_true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl AnnotatorBackend for NoisyOracleBackend {
    fn tag(&self) -> &'static str {
        "noisy-oracle"
    }

    fn annotate_one(
        &mut self,
        pair: &KgPair,
        source: EntityId,
        candidates: &CandidateList,
    ) -> Result<BackendReply, BackendError> {
        let gt = pair
            .ground_truth
            .as_ref()
            .ok_or(BackendError::NoGroundTruth)?;
        let truth = match gt.target_of(source).filter(|&t| candidates.contains(t)) {
            Some(t) => t,
            None => return Ok(BackendReply::default()),
        };
        let chosen = if self.rng.gen::<f64>() < self.p_true {
            truth
        } else {
            let wrong: Vec<EntityId> = candidates
                .candidates
                .iter()
                .map(|&(t, _)| t)
                .filter(|&t| t != truth)
                .collect();
            if wrong.is_empty() {
                truth
            } else {
                wrong[self.rng.gen_range(0..wrong.len())]
            }
        };
        Ok(BackendReply {
            chosen: Some(chosen),
            ..Default::default()
        })
    }
}

/// Annotates one source entity, charging the budget before the backend runs.
pub fn annotate(
    backend: &mut dyn AnnotatorBackend,
    pair: &KgPair,
    source: EntityId,
    candidates: &CandidateList,
    budget: &mut Budget,
) -> Result<Annotation, AnnotateError> {
    budget.charge_query()?;
    let reply = backend.annotate_one(pair, source, candidates)?;
    budget.charge_tokens(reply.tokens_in + reply.tokens_out);
    Ok(Annotation {
        source,
        chosen: reply.chosen,
        tokens_in: reply.tokens_in,
        tokens_out: reply.tokens_out,
        backend: backend.tag(),
        note: reply.note,
    })
}

/// Outcome of a batch run. A backend failure aborts the loop but the labels
/// gathered so far are still returned.
#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub labels: PseudoLabelSet,
    pub annotations: Vec<Annotation>,
    /// Sources not queried because the budget ran out or a backend failed.
    pub skipped: usize,
    pub none_count: usize,
    pub cache_hits: usize,
    pub error: Option<BackendError>,
}

/// Annotates `sources` in order, one query each, deduplicating labels.
/// Cached sources are replayed without touching the budget. `prompt_seed`
/// keys the per-source neighbor sampling for prompt-building backends.
pub fn annotate_batch(
    backend: &mut dyn AnnotatorBackend,
    pair: &KgPair,
    sources: &[EntityId],
    k: usize,
    budget: &mut Budget,
    mut cache: Option<&mut LabelCache>,
) -> Result<BatchOutcome, AnnotateError> {
    let mut outcome = BatchOutcome::default();

    // Resolve cache hits and build the billable request list.
    let mut requests: Vec<(EntityId, CandidateList)> = Vec::new();
    let mut pending: Vec<EntityId> = Vec::new();
    for &source in sources {
        if let Some(hit) = cache.as_deref().and_then(|c| c.lookup(source)) {
            outcome.cache_hits += 1;
            match hit.chosen {
                Some(t) => {
                    outcome.labels.insert(source, t, Provenance::Annotated);
                }
                None => outcome.none_count += 1,
            }
            outcome.annotations.push(Annotation {
                source,
                chosen: hit.chosen,
                tokens_in: 0,
                tokens_out: 0,
                backend: "cache",
                note: None,
            });
            continue;
        }
        if !budget.can_query() {
            outcome.skipped += 1;
            continue;
        }
        budget.charge_query().expect("checked can_query");
        requests.push((source, filter_candidates(pair, source, k)?));
        pending.push(source);
    }

    let (replies, error) = backend.annotate_many(pair, &requests);
    for (i, reply) in replies.iter().enumerate() {
        let source = pending[i];
        budget.charge_tokens(reply.tokens_in + reply.tokens_out);
        match reply.chosen {
            Some(t) => {
                outcome.labels.insert(source, t, Provenance::Annotated);
            }
            None => outcome.none_count += 1,
        }
        if let Some(c) = cache.as_deref_mut() {
            c.record(source, reply.chosen, reply.tokens_in + reply.tokens_out);
        }
        outcome.annotations.push(Annotation {
            source,
            chosen: reply.chosen,
            tokens_in: reply.tokens_in,
            tokens_out: reply.tokens_out,
            backend: backend.tag(),
            note: reply.note.clone(),
        });
    }
    outcome.skipped += pending.len() - replies.len();
    outcome.error = error;
    Ok(outcome)
}

#[derive(Clone, Copy, Debug)]
pub struct CacheEntry {
    pub chosen: Option<EntityId>,
    pub tokens: u64,
}

/// Tab-separated annotation cache (`source_id\ttarget_id_or_NONE\ttokens`)
/// so repeated runs never re-bill the same source entity.
#[derive(Debug, Default)]
pub struct LabelCache {
    path: Option<PathBuf>,
    entries: BTreeMap<EntityId, CacheEntry>,
}

impl LabelCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens a cache file, treating a missing file as an empty cache.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, crate::refine::LabelIoError> {
        let path = path.as_ref().to_path_buf();
        let mut cache = Self {
            path: Some(path.clone()),
            entries: BTreeMap::new(),
        };
        if !path.is_file() {
            return Ok(cache);
        }
        let file = std::fs::File::open(&path).map_err(crate::refine::LabelIoError::Io)?;
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(crate::refine::LabelIoError::Io)?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(crate::refine::LabelIoError::Malformed {
                    line: lineno + 1,
                    reason: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let bad = |what: &str| crate::refine::LabelIoError::Malformed {
                line: lineno + 1,
                reason: what.to_string(),
            };
            let source = EntityId(fields[0].parse().map_err(|_| bad("bad source id"))?);
            let chosen = if fields[1] == "NONE" {
                None
            } else {
                Some(EntityId(
                    fields[1].parse().map_err(|_| bad("bad target id"))?,
                ))
            };
            let tokens = fields[2].parse().map_err(|_| bad("bad token count"))?;
            cache.entries.insert(source, CacheEntry { chosen, tokens });
        }
        Ok(cache)
    }

    pub fn lookup(&self, source: EntityId) -> Option<CacheEntry> {
        self.entries.get(&source).copied()
    }

    pub fn record(&mut self, source: EntityId, chosen: Option<EntityId>, tokens: u64) {
        self.entries.insert(source, CacheEntry { chosen, tokens });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self) -> std::io::Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut out = Vec::new();
        for (s, e) in &self.entries {
            let t = e
                .chosen
                .map(|t| t.to_string())
                .unwrap_or_else(|| "NONE".to_string());
            writeln!(out, "{s}\t{t}\t{}", e.tokens)?;
        }
        std::fs::write(path, out)
    }
}
