//! Chat-completion annotator backend.
//!
//! Posts a JSON `messages` body to a configurable endpoint at temperature 0,
//! authenticating with a bearer token read from an environment variable (the
//! key is never a flag and never logged). Transient failures retry with
//! exponential backoff; replies are parsed as a bare candidate index, an
//! exact candidate name, or NONE — anything else degrades to no label with a
//! note rather than an error.

use super::{AnnotatorBackend, BackendError, BackendReply, CandidateList};
use crate::kg::{EntityId, KgPair};
use std::time::Duration;

#[derive(Clone, Debug)]
pub struct LlmConfig {
    /// Chat-completion endpoint URL.
    pub endpoint: String,
    /// Model name string sent in the request body.
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Retries after the first attempt on transient failures.
    pub retries: u32,
    /// Base backoff in milliseconds, doubled per retry.
    pub backoff_ms: u64,
    /// Bounded in-flight request parallelism for batches.
    pub parallelism: usize,
    /// Per-request timeout in seconds.
    pub timeout_s: u64,
    /// Base seed for the per-source neighbor sampling in prompts.
    pub prompt_seed: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".to_string(),
            model: "gpt-3.5-turbo".to_string(),
            api_key_env: "KGALIGN_API_KEY".to_string(),
            retries: 3,
            backoff_ms: 500,
            parallelism: 4,
            timeout_s: 60,
            prompt_seed: 0,
        }
    }
}

pub struct LlmBackend {
    config: LlmConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl LlmBackend {
    /// Reads the API key from the configured environment variable.
    pub fn new(config: LlmConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| BackendError::MissingApiKey(config.api_key_env.clone()))?;
        Ok(Self::with_key(config, api_key))
    }

    pub fn with_key(config: LlmConfig, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            api_key,
            agent,
        }
    }

    fn prompt_seed_for(&self, source: EntityId) -> u64 {
        self.config.prompt_seed.wrapping_add(source.0 as u64)
    }

    fn query(
        &self,
        pair: &KgPair,
        source: EntityId,
        candidates: &CandidateList,
    ) -> Result<BackendReply, BackendError> {
        let prompt = super::build_prompt(pair, source, candidates, self.prompt_seed_for(source));
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        })
        .to_string();

        let attempts_max = self.config.retries + 1;
        let mut attempt = 0;
        let text = loop {
            attempt += 1;
            let result = self
                .agent
                .post(&self.config.endpoint)
                .header("Authorization", &format!("Bearer {}", self.api_key))
                .header("Content-Type", "application/json")
                .send(body.as_str());
            let transient = match result {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        break resp.body_mut().read_to_string().map_err(|e| {
                            BackendError::Transport {
                                attempts: attempt,
                                cause: e.to_string(),
                            }
                        })?;
                    }
                    if status == 429 || status >= 500 {
                        format!("status {status}")
                    } else {
                        return Err(BackendError::Rejected(status));
                    }
                }
                Err(e) => e.to_string(),
            };
            if attempt >= attempts_max {
                return Err(BackendError::Transport {
                    attempts: attempt,
                    cause: transient,
                });
            }
            std::thread::sleep(Duration::from_millis(
                self.config.backoff_ms << (attempt - 1).min(16),
            ));
        };

        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let content = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| {
                BackendError::MalformedResponse("missing choices[0].message.content".to_string())
            })?;
        // Rough length/4 estimate when the endpoint reports no usage.
        let tokens_in = value["usage"]["prompt_tokens"]
            .as_u64()
            .unwrap_or(prompt.len() as u64 / 4);
        let tokens_out = value["usage"]["completion_tokens"]
            .as_u64()
            .unwrap_or(content.len() as u64 / 4);

        let (chosen, note) = parse_reply(content, pair, candidates);
        Ok(BackendReply {
            chosen,
            tokens_in,
            tokens_out,
            note,
        })
    }
}

/// Interprets a model reply: a bare 1-based candidate index, a candidate name
/// matching exactly after trimming, or NONE. Anything else yields no label
/// plus a note.
pub fn parse_reply(
    reply: &str,
    pair: &KgPair,
    candidates: &CandidateList,
) -> (Option<EntityId>, Option<String>) {
    let trimmed = reply.trim();
    if trimmed.eq_ignore_ascii_case("none") {
        return (None, None);
    }
    if let Ok(idx) = trimmed.parse::<usize>() {
        if idx >= 1 && idx <= candidates.candidates.len() {
            return (Some(candidates.candidates[idx - 1].0), None);
        }
        return (None, Some(format!("candidate index {idx} out of range")));
    }
    for &(t, _) in &candidates.candidates {
        if pair.target.entity_name(t) == trimmed {
            return (Some(t), None);
        }
    }
    (None, Some(format!("unparsed reply: {trimmed:?}")))
}

impl AnnotatorBackend for LlmBackend {
    fn tag(&self) -> &'static str {
        "llm"
    }

    fn annotate_one(
        &mut self,
        pair: &KgPair,
        source: EntityId,
        candidates: &CandidateList,
    ) -> Result<BackendReply, BackendError> {
        self.query(pair, source, candidates)
    }

    /// Waves of up to `parallelism` concurrent requests, committed in
    /// request order. Results after the first failure are discarded so the
    /// emitted label set is deterministic given deterministic replies.
    fn annotate_many(
        &mut self,
        pair: &KgPair,
        requests: &[(EntityId, CandidateList)],
    ) -> (Vec<BackendReply>, Option<BackendError>) {
        let this = &*self;
        let wave = this.config.parallelism.max(1);
        let mut replies = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(wave) {
            let results: Vec<Result<BackendReply, BackendError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(source, cands)| scope.spawn(move || this.query(pair, *source, cands)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("llm worker panicked"))
                    .collect()
            });
            for r in results {
                match r {
                    Ok(reply) => replies.push(reply),
                    Err(e) => return (replies, Some(e)),
                }
            }
        }
        (replies, None)
    }
}
