//! HTTP client for an LLM-backed scoring service.
//!
//! Request: `POST <endpoint>` with `{"prompt": "...", "tokens": [...]}` and a
//! bearer token from `SCORER_API_KEY`. Response: `{"scores": [...]}`, one
//! score per token. Anything else is an error; free text is never parsed.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_scores, DiskCache, ScoreCacheKey, ScoreError, Scorer, ScorerStats};
use crate::dataset::{ImportanceScores, TokenizedQuestion};

pub const API_KEY_ENV: &str = "SCORER_API_KEY";
pub const CACHE_DIR_ENV: &str = "SCORER_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_in_flight() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    250
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            max_in_flight: default_max_in_flight(),
            backoff_ms: default_backoff_ms(),
            cache_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(ScoreError::InvalidSpec(format!(
                "endpoint must be an http(s) URL, got '{}'",
                self.endpoint
            )));
        }
        if self.max_in_flight == 0 {
            return Err(ScoreError::InvalidSpec("max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prompt: &'a str,
    tokens: &'a [String],
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Counting semaphore bounding concurrent upstream requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

type Slot = Arc<OnceLock<Result<ImportanceScores, ScoreError>>>;

pub struct RemoteScorer {
    config: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    cache: Option<DiskCache>,
    // In-process memo; concurrent requests for one key share a single slot.
    memo: Mutex<HashMap<ScoreCacheKey, Slot>>,
    limiter: Limiter,
    upstream_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Result<Self, ScoreError> {
        config.validate()?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{API_KEY_ENV} is not set; sending unauthenticated requests");
        }
        let cache_dir = config
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from));
        let cache = cache_dir.and_then(|dir| match DiskCache::open(&dir) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("score cache at {} unavailable, continuing uncached: {e}", dir.display());
                None
            }
        });
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build();
        Ok(Self {
            limiter: Limiter::new(config.max_in_flight),
            agent: agent_config.into(),
            config,
            api_key,
            cache,
            memo: Mutex::new(HashMap::new()),
            upstream_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        })
    }

    fn load_or_fetch(&self, question: &TokenizedQuestion, key: &ScoreCacheKey) -> Result<ImportanceScores, ScoreError> {
        if let Some(cache) = &self.cache {
            match cache.get(key) {
                Ok(Some(scores)) if check_scores(question.len(), &scores).is_ok() => {
                    self.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(scores);
                }
                Ok(Some(_)) => log::warn!("ignoring cache entry {key} with wrong shape"),
                Ok(None) => {}
                Err(e) => log::warn!("score cache read failed for {key}: {e}"),
            }
        }
        let scores = self.fetch(question)?;
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(key, &scores) {
                log::warn!("score cache write failed for {key}: {e}");
            }
        }
        Ok(scores)
    }

    fn fetch(&self, question: &TokenizedQuestion) -> Result<ImportanceScores, ScoreError> {
        let _permit = self.limiter.acquire();
        let body = ScoreRequest {
            prompt: &question.prompt,
            tokens: &question.tokens,
        };
        let mut last_error = String::new();
        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            self.upstream_calls.fetch_add(1, Ordering::Relaxed);
            let mut request = self.agent.post(&self.config.endpoint);
            if let Some(key) = &self.api_key {
                request = request.header("Authorization", &format!("Bearer {key}"));
            }
            let mut response = match request.send_json(&body) {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status().as_u16();
            let text = response
                .body_mut()
                .read_to_string()
                .map_err(|e| e.to_string());
            if status == 429 || status >= 500 {
                last_error = format!("HTTP {status}");
                continue;
            }
            if status >= 400 {
                return Err(ScoreError::Transport {
                    attempts: attempt + 1,
                    message: format!("HTTP {status}: {}", text.unwrap_or_default()),
                });
            }
            let text = match text {
                Ok(t) => t,
                Err(e) => {
                    last_error = e;
                    continue;
                }
            };
            let parsed: ScoreResponse = serde_json::from_str(&text).map_err(|e| ScoreError::Parse(e.to_string()))?;
            let scores = ImportanceScores(parsed.scores);
            check_scores(question.len(), &scores)?;
            return Ok(scores);
        }
        Err(ScoreError::Transport {
            attempts,
            message: last_error,
        })
    }
}

impl Scorer for RemoteScorer {
    fn identity(&self) -> String {
        format!("remote(endpoint={})", self.config.endpoint)
    }

    fn score(&self, question: &TokenizedQuestion) -> Result<ImportanceScores, ScoreError> {
        let key = ScoreCacheKey::for_question(question, &self.identity());
        let slot = self.memo.lock().unwrap().entry(key.clone()).or_default().clone();
        let mut computed = false;
        let result = slot
            .get_or_init(|| {
                computed = true;
                self.load_or_fetch(question, &key)
            })
            .clone();
        if !computed && result.is_ok() {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
        }
        if result.is_err() {
            // Let a later call retry instead of replaying the failure.
            let mut memo = self.memo.lock().unwrap();
            if memo.get(&key).is_some_and(|s| Arc::ptr_eq(s, &slot)) {
                memo.remove(&key);
            }
        }
        result
    }

    fn stats(&self) -> ScorerStats {
        ScorerStats {
            upstream_calls: self.upstream_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }
}
