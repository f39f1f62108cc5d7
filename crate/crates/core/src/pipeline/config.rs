//! Flat `key = value` run configuration files.
//!
//! Empty lines and `#` comments are ignored. Unknown keys and unparseable
//! values are configuration errors. Keys mirror [`RunConfig`]; command-line
//! flags override file values.

use super::{BackendChoice, DataSource, PipelineError, RunConfig, SynthSpec};
use crate::annotate::LlmConfig;
use crate::select::UrWeight;
use std::path::PathBuf;

/// Applies `key = value` lines from `text` on top of `base`.
pub fn parse_config_str(text: &str, mut base: RunConfig) -> Result<RunConfig, PipelineError> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(bad(lineno, "expected key = value"));
        };
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut base, key, value).map_err(|reason| bad(lineno, &reason))?;
    }
    Ok(base)
}

fn bad(lineno: usize, reason: &str) -> PipelineError {
    PipelineError::Config(format!("config line {}: {reason}", lineno + 1))
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), String> {
    let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number: {v}"));
    let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| format!("bad integer: {v}"));
    let parse_u64 = |v: &str| v.parse::<u64>().map_err(|_| format!("bad integer: {v}"));
    let parse_bool = |v: &str| match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("bad boolean: {v}")),
    };

    match key {
        "data" => cfg.data = DataSource::OpenEa(PathBuf::from(value)),
        "synth.entities" => synth_mut(cfg).entity_count = parse_usize(value)?,
        "synth.relations" => synth_mut(cfg).relation_count = parse_usize(value)?,
        "synth.mean_degree" => synth_mut(cfg).mean_degree = parse_f64(value)?,
        "synth.dropout" => synth_mut(cfg).edge_dropout = parse_f64(value)?,
        "synth.name_noise" => synth_mut(cfg).name_noise = parse_f64(value)?,
        "synth.seed" => synth_mut(cfg).seed = parse_u64(value)?,
        "budget_fraction" => cfg.budget_fraction = parse_f64(value)?,
        "iterations" => cfg.iterations = parse_usize(value)?,
        "k" => cfg.k = parse_usize(value)?,
        "seed" => cfg.seed = parse_u64(value)?,
        "tokens.max" => cfg.max_tokens = Some(parse_u64(value)?),
        "labels.cache" => cfg.label_cache = Some(PathBuf::from(value)),
        "backend" => {
            cfg.backend = match value {
                "oracle" => BackendChoice::Oracle,
                "noisy" => BackendChoice::NoisyOracle { p_true: 0.6 },
                "llm" => BackendChoice::Llm(LlmConfig::default()),
                other => return Err(format!("unknown backend: {other}")),
            }
        }
        "noisy.p_true" => {
            let p = parse_f64(value)?;
            match &mut cfg.backend {
                BackendChoice::NoisyOracle { p_true } => *p_true = p,
                _ => cfg.backend = BackendChoice::NoisyOracle { p_true: p },
            }
        }
        "llm.endpoint" => llm_mut(cfg).endpoint = value.to_string(),
        "llm.model" => llm_mut(cfg).model = value.to_string(),
        "llm.api_key_env" => llm_mut(cfg).api_key_env = value.to_string(),
        "llm.retries" => llm_mut(cfg).retries = parse_usize(value)? as u32,
        "llm.parallelism" => llm_mut(cfg).parallelism = parse_usize(value)?,
        "llm.backoff_ms" => llm_mut(cfg).backoff_ms = parse_u64(value)?,
        "llm.timeout_s" => llm_mut(cfg).timeout_s = parse_u64(value)?,
        "refiner.delta0" => cfg.refiner.delta0 = parse_f64(value)?,
        "refiner.delta1" => cfg.refiner.delta1 = parse_f64(value)?,
        "refiner.n_lr" => cfg.refiner.n_lr = parse_usize(value)?,
        "refiner.augment_inferred" => cfg.refiner.augment_inferred = parse_bool(value)?,
        "refiner.seed_admit" => cfg.refiner.seed_admit = parse_bool(value)?,
        "reasoning.theta_min" => cfg.refiner.theta_min = parse_f64(value)?,
        // Records the interpretation of the subrelation estimator's outer
        // sum; only the per-triple reading is implemented.
        "reasoning.subrel_sum" => {
            if value != "triples" {
                return Err(format!(
                    "unsupported subrel_sum: {value} (only \"triples\")"
                ));
            }
        }
        "selector.ur_weight" => {
            cfg.ur_weight = match value {
                "fun" => UrWeight::Functionality,
                "inv-fun" => UrWeight::InverseFunctionality,
                other => return Err(format!("unknown ur_weight: {other}")),
            }
        }
        "kg.reverse_relations" => cfg.reverse_relations = parse_bool(value)?,
        "matcher.dim" => cfg.matcher.embedding_dim = parse_usize(value)?,
        "matcher.epochs" => cfg.matcher.epochs = parse_usize(value)?,
        "matcher.lr" => cfg.matcher.learning_rate = parse_f64(value)?,
        "matcher.margin" => cfg.matcher.margin = parse_f64(value)?,
        "matcher.negatives" => cfg.matcher.negatives_per_positive = parse_usize(value)?,
        "matcher.agg_rounds" => cfg.matcher.aggregation_rounds = parse_usize(value)?,
        other => return Err(format!("unknown key: {other}")),
    }
    Ok(())
}

fn synth_mut(cfg: &mut RunConfig) -> &mut SynthSpec {
    if !matches!(cfg.data, DataSource::Synth(_)) {
        cfg.data = DataSource::Synth(SynthSpec::default());
    }
    match &mut cfg.data {
        DataSource::Synth(spec) => spec,
        DataSource::OpenEa(_) => unreachable!(),
    }
}

fn llm_mut(cfg: &mut RunConfig) -> &mut LlmConfig {
    if !matches!(cfg.backend, BackendChoice::Llm(_)) {
        cfg.backend = BackendChoice::Llm(LlmConfig::default());
    }
    match &mut cfg.backend {
        BackendChoice::Llm(llm) => llm,
        _ => unreachable!(),
    }
}
