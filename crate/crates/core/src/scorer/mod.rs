//! Importance scorers.
//!
//! Every scorer maps a [`TokenizedQuestion`] to one score in `[0, 1]` per
//! token and must be a pure function of the question: the robust pipeline
//! takes a maximum over many perturbed questions, and that maximum only
//! means something if re-scoring the same question returns the same numbers.
//! Stochastic kinds therefore derive all randomness from their seed and a
//! digest of the input, never from ambient state.

mod cache;
mod remote;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, GroundTruthExplanation, ImportanceScores, TokenizedQuestion};

pub use cache::DiskCache;
pub use remote::{RemoteConfig, RemoteScorer, API_KEY_ENV, CACHE_DIR_ENV};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("invalid scorer spec: {0}")]
    InvalidSpec(String),
    #[error("scorer returned {got} scores for a {expected}-token question")]
    LengthMismatch { expected: usize, got: usize },
    #[error("scorer returned score {value} at position {position}, outside [0, 1]")]
    OutOfRange { position: usize, value: f64 },
    #[error("upstream request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("cannot parse upstream response: {0}")]
    Parse(String),
    #[error("no ground truth registered for question '{0}'")]
    MissingTruth(String),
    #[error("no precomputed scores for question '{0}' with these tokens")]
    NotPrecomputed(String),
}

/// Counters a scorer exposes for ball statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerStats {
    pub upstream_calls: u64,
    pub cache_hits: u64,
}

pub trait Scorer: Send + Sync {
    /// Stable identity string, recorded in calibration provenance and mixed
    /// into cache keys.
    fn identity(&self) -> String;

    /// True when the score at position `j` depends only on `j` and the token
    /// at `j` (and the question id), never on the other tokens.
    fn is_context_free(&self) -> bool {
        false
    }

    fn score(&self, question: &TokenizedQuestion) -> Result<ImportanceScores, ScoreError>;

    fn stats(&self) -> ScorerStats {
        ScorerStats::default()
    }
}

/// Checks the output contract shared by all scorers.
pub fn check_scores(expected_len: usize, scores: &ImportanceScores) -> Result<(), ScoreError> {
    if scores.len() != expected_len {
        return Err(ScoreError::LengthMismatch {
            expected: expected_len,
            got: scores.len(),
        });
    }
    for (position, &value) in scores.values().iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(ScoreError::OutOfRange { position, value });
        }
    }
    Ok(())
}

/// Content address of a scoring request: SHA-256 over the prompt, the token
/// list and the scorer identity, each length-prefixed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScoreCacheKey(String);

impl ScoreCacheKey {
    pub fn new(prompt: &str, tokens: &[String], scorer_identity: &str) -> Self {
        let mut hasher = Sha256::new();
        feed(&mut hasher, prompt.as_bytes());
        hasher.update((tokens.len() as u64).to_le_bytes());
        for token in tokens {
            feed(&mut hasher, token.as_bytes());
        }
        feed(&mut hasher, scorer_identity.as_bytes());
        Self(hex::encode(hasher.finalize()))
    }

    pub fn for_question(question: &TokenizedQuestion, scorer_identity: &str) -> Self {
        Self::new(&question.prompt, &question.tokens, scorer_identity)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ScoreCacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn feed(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

fn seeded_rng(seed: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        feed(&mut hasher, part);
    }
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Synthetic scorer: indicator of the ground truth plus clamped Gaussian
/// noise. The noise at position `j` is keyed on `(seed, question id, j,
/// token at j)`, which makes the scorer context-free.
pub fn oracle_noise_score(
    truth: &GroundTruthExplanation,
    question: &TokenizedQuestion,
    sigma: f64,
    seed: u64,
) -> ImportanceScores {
    let values = question
        .tokens
        .iter()
        .enumerate()
        .map(|(j, token)| {
            let base = if truth.contains(j) { 1.0 } else { 0.0 };
            let noise = if sigma > 0.0 {
                let mut rng = seeded_rng(
                    seed,
                    &[question.id.as_bytes(), &(j as u64).to_le_bytes(), token.as_bytes()],
                );
                Normal::new(0.0, sigma).expect("sigma checked positive").sample(&mut rng)
            } else {
                0.0
            };
            (base + noise).clamp(0.0, 1.0)
        })
        .collect();
    ImportanceScores(values)
}

/// Ground truth by question id, for the oracle scorer.
pub type TruthTable = HashMap<String, GroundTruthExplanation>;

pub fn truth_table(dataset: &Dataset) -> TruthTable {
    dataset
        .examples
        .iter()
        .map(|ex| (ex.question.id.clone(), ex.explanation.clone()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct OracleNoiseScorer {
    pub sigma: f64,
    pub seed: u64,
    truths: TruthTable,
}

impl OracleNoiseScorer {
    pub fn new(sigma: f64, seed: u64, truths: TruthTable) -> Self {
        Self { sigma, seed, truths }
    }
}

impl Scorer for OracleNoiseScorer {
    fn identity(&self) -> String {
        format!("oracle_noise(sigma={},seed={})", self.sigma, self.seed)
    }

    fn is_context_free(&self) -> bool {
        true
    }

    fn score(&self, question: &TokenizedQuestion) -> Result<ImportanceScores, ScoreError> {
        let truth = self
            .truths
            .get(&question.id)
            .ok_or_else(|| ScoreError::MissingTruth(question.id.clone()))?;
        Ok(oracle_noise_score(truth, question, self.sigma, self.seed))
    }
}

/// Uninformative scorer: i.i.d. uniform scores keyed on the whole question,
/// so any token change reshuffles every position.
#[derive(Debug, Clone)]
pub struct UniformRandomScorer {
    pub seed: u64,
}

impl Scorer for UniformRandomScorer {
    fn identity(&self) -> String {
        format!("uniform_random(seed={})", self.seed)
    }

    fn score(&self, question: &TokenizedQuestion) -> Result<ImportanceScores, ScoreError> {
        let key = ScoreCacheKey::for_question(question, &self.identity());
        let mut rng = seeded_rng(self.seed, &[key.as_str().as_bytes()]);
        Ok(ImportanceScores(
            (0..question.len()).map(|_| rng.random::<f64>()).collect(),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct ConstantScorer {
    pub value: f64,
}

impl Scorer for ConstantScorer {
    fn identity(&self) -> String {
        format!("constant(value={})", self.value)
    }

    fn is_context_free(&self) -> bool {
        true
    }

    fn score(&self, question: &TokenizedQuestion) -> Result<ImportanceScores, ScoreError> {
        Ok(ImportanceScores(vec![self.value; question.len()]))
    }
}

/// Replays the scores stored alongside a dataset. Only the exact recorded
/// token sequence can be scored.
#[derive(Debug, Clone)]
pub struct PrecomputedScorer {
    table: HashMap<String, (Vec<String>, ImportanceScores)>,
}

pub const PRECOMPUTED_IDENTITY: &str = "dataset";

impl PrecomputedScorer {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let table = dataset
            .examples
            .iter()
            .map(|ex| {
                (
                    ex.question.id.clone(),
                    (ex.question.tokens.clone(), ex.scores.clone()),
                )
            })
            .collect();
        Self { table }
    }
}

impl Scorer for PrecomputedScorer {
    fn identity(&self) -> String {
        PRECOMPUTED_IDENTITY.to_string()
    }

    fn score(&self, question: &TokenizedQuestion) -> Result<ImportanceScores, ScoreError> {
        match self.table.get(&question.id) {
            Some((tokens, scores)) if *tokens == question.tokens => Ok(scores.clone()),
            _ => Err(ScoreError::NotPrecomputed(question.id.clone())),
        }
    }
}

/// Declarative scorer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    OracleNoise { sigma: f64, seed: u64 },
    UniformRandom { seed: u64 },
    Constant { value: f64 },
    Remote(RemoteConfig),
}

impl ScorerSpec {
    pub fn validate(&self) -> Result<(), ScoreError> {
        match self {
            Self::OracleNoise { sigma, .. } if !(sigma.is_finite() && *sigma >= 0.0) => {
                Err(ScoreError::InvalidSpec(format!("sigma must be finite and >= 0, got {sigma}")))
            }
            Self::Constant { value } if !(0.0..=1.0).contains(value) => {
                Err(ScoreError::InvalidSpec(format!("constant must lie in [0, 1], got {value}")))
            }
            Self::Remote(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }

    /// Instantiates the scorer. `truths` is consulted only by the oracle kind.
    pub fn build(&self, truths: &TruthTable) -> Result<Box<dyn Scorer>, ScoreError> {
        self.validate()?;
        Ok(match self {
            Self::OracleNoise { sigma, seed } => {
                Box::new(OracleNoiseScorer::new(*sigma, *seed, truths.clone()))
            }
            Self::UniformRandom { seed } => Box::new(UniformRandomScorer { seed: *seed }),
            Self::Constant { value } => Box::new(ConstantScorer { value: *value }),
            Self::Remote(cfg) => Box::new(RemoteScorer::new(cfg.clone())?),
        })
    }

    /// Parses `kind` or `kind:key=value,...`, falling back to `default_seed`
    /// for stochastic kinds without an explicit seed.
    pub fn parse_with_seed(text: &str, default_seed: u64) -> Result<Self, ScoreError> {
        let (kind, rest) = text.split_once(':').unwrap_or((text, ""));
        let mut params = HashMap::new();
        for pair in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| ScoreError::InvalidSpec(format!("expected key=value, got '{pair}'")))?;
            params.insert(k.trim().to_string(), v.trim().to_string());
        }
        let take = |params: &mut HashMap<String, String>, key: &str| params.remove(key);
        let num = |raw: Option<String>, key: &str| -> Result<Option<f64>, ScoreError> {
            raw.map(|v| {
                v.parse::<f64>()
                    .map_err(|_| ScoreError::InvalidSpec(format!("{key}: not a number: '{v}'")))
            })
            .transpose()
        };
        let int = |raw: Option<String>, key: &str| -> Result<Option<u64>, ScoreError> {
            raw.map(|v| {
                v.parse::<u64>()
                    .map_err(|_| ScoreError::InvalidSpec(format!("{key}: not an integer: '{v}'")))
            })
            .transpose()
        };

        let spec = match kind.trim() {
            "oracle_noise" => Self::OracleNoise {
                sigma: num(take(&mut params, "sigma"), "sigma")?
                    .ok_or_else(|| ScoreError::InvalidSpec("oracle_noise needs sigma".into()))?,
                seed: int(take(&mut params, "seed"), "seed")?.unwrap_or(default_seed),
            },
            "uniform_random" => Self::UniformRandom {
                seed: int(take(&mut params, "seed"), "seed")?.unwrap_or(default_seed),
            },
            "constant" => Self::Constant {
                value: num(take(&mut params, "value"), "value")?
                    .ok_or_else(|| ScoreError::InvalidSpec("constant needs value".into()))?,
            },
            "remote" => {
                let endpoint = take(&mut params, "endpoint")
                    .ok_or_else(|| ScoreError::InvalidSpec("remote needs endpoint".into()))?;
                let mut cfg = RemoteConfig::new(endpoint);
                if let Some(v) = int(take(&mut params, "timeout_ms"), "timeout_ms")? {
                    cfg.timeout_ms = v;
                }
                if let Some(v) = int(take(&mut params, "max_retries"), "max_retries")? {
                    cfg.max_retries = v as u32;
                }
                if let Some(v) = int(take(&mut params, "max_in_flight"), "max_in_flight")? {
                    cfg.max_in_flight = v as usize;
                }
                Self::Remote(cfg)
            }
            other => return Err(ScoreError::InvalidSpec(format!("unknown scorer kind '{other}'"))),
        };
        if let Some(unused) = params.keys().next() {
            return Err(ScoreError::InvalidSpec(format!("unknown parameter '{unused}' for {kind}")));
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl FromStr for ScorerSpec {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_with_seed(s, 0)
    }
}
