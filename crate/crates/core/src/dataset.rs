//! Domain types, validation, JSON Lines ingestion and seeded splitting.
//!
//! A dataset file holds one record per line:
//!
//! ```text
//! {"id": "q1", "tokens": ["knee", "pain"], "scores": [0.9, 0.2], "explanation_indices": [0], "answer": "A"}
//! ```
//!
//! Token identity everywhere in this crate is the pair `(position, string)`
//! with 0-based positions, so repeated words in a question stay distinct.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;

/// Instruction prepended to every question when it is sent to an LLM scorer.
pub const DEFAULT_PROMPT: &str = "Read the question and assign each word an importance score \
between 0 and 1 that reflects how essential the word is for answering it. \
Respond with JSON of the form {\"scores\": [...]} containing exactly one score per word, in order.";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedQuestion {
    pub id: String,
    pub tokens: Vec<String>,
    pub prompt: String,
}

impl TokenizedQuestion {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Self {
        Self {
            id: id.into(),
            tokens,
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Copy of this question with the token at `position` replaced.
    pub fn with_token(&self, position: usize, token: &str) -> Self {
        let mut out = self.clone();
        out.tokens[position] = token.to_string();
        out
    }
}

/// Per-token importance scores, one per position, each expected in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImportanceScores(pub Vec<f64>);

impl ImportanceScores {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, position: usize) -> Option<f64> {
        self.0.get(position).copied()
    }
}

/// Annotator-marked essential token positions of the clean question.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruthExplanation {
    pub indices: BTreeSet<usize>,
}

impl GroundTruthExplanation {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            indices: indices.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.indices.contains(&position)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationExample {
    pub question: TokenizedQuestion,
    pub scores: ImportanceScores,
    pub explanation: GroundTruthExplanation,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<CalibrationExample>,
    pub source_path: String,
}

impl Dataset {
    pub fn new(examples: Vec<CalibrationExample>, source_path: impl Into<String>) -> Self {
        Self {
            examples,
            source_path: source_path.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// One invariant violation found by [`validate_example`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyQuestion,
    EmptyToken { position: usize },
    LengthMismatch { tokens: usize, scores: usize },
    ScoreOutOfRange { position: usize, value: f64 },
    EmptyExplanation,
    IndexOutOfRange { index: usize, tokens: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyQuestion => f.write_str("question has no tokens"),
            Self::EmptyToken { position } => write!(f, "tokens[{position}] is an empty string"),
            Self::LengthMismatch { tokens, scores } => {
                write!(f, "length mismatch: {tokens} tokens but {scores} scores")
            }
            Self::ScoreOutOfRange { position, value } => {
                write!(f, "scores[{position}] = {value} is outside [0, 1]")
            }
            Self::EmptyExplanation => f.write_str("empty ground-truth explanation"),
            Self::IndexOutOfRange { index, tokens } => write!(
                f,
                "explanation_indices contains {index}, out of range for {tokens} tokens"
            ),
        }
    }
}

/// Outcome of validating one example. Lists every violation, not just the first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Verdict {
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_example(example: &CalibrationExample) -> Verdict {
    let mut violations = Vec::new();
    let k = example.question.tokens.len();
    if k == 0 {
        violations.push(Violation::EmptyQuestion);
    }
    for (position, token) in example.question.tokens.iter().enumerate() {
        if token.is_empty() {
            violations.push(Violation::EmptyToken { position });
        }
    }
    if example.scores.len() != k {
        violations.push(Violation::LengthMismatch {
            tokens: k,
            scores: example.scores.len(),
        });
    }
    for (position, &value) in example.scores.values().iter().enumerate() {
        // NaN fails both comparisons and lands here too.
        if !(0.0..=1.0).contains(&value) {
            violations.push(Violation::ScoreOutOfRange { position, value });
        }
    }
    if example.explanation.is_empty() {
        violations.push(Violation::EmptyExplanation);
    }
    for &index in &example.explanation.indices {
        if index >= k {
            violations.push(Violation::IndexOutOfRange { index, tokens: k });
        }
    }
    Verdict { violations }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: record '{id}' is invalid: {verdict}")]
    Invalid {
        path: String,
        line: usize,
        id: String,
        verdict: Verdict,
    },
    #[error("{0}: dataset is empty")]
    Empty(String),
    #[error("cannot write dataset: {0}")]
    Write(#[from] std::io::Error),
    #[error("calibration fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("split of {n} examples at fraction {fraction} leaves one side empty")]
    EmptySide { n: usize, fraction: f64 },
}

/// Wire form of one JSON Lines record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    tokens: Vec<String>,
    scores: Vec<f64>,
    explanation_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
}

impl Record {
    fn into_example(self) -> CalibrationExample {
        CalibrationExample {
            question: TokenizedQuestion {
                id: self.id,
                tokens: self.tokens,
                prompt: self.prompt.unwrap_or_else(|| DEFAULT_PROMPT.to_string()),
            },
            scores: ImportanceScores(self.scores),
            explanation: GroundTruthExplanation::new(self.explanation_indices),
            answer: self.answer,
        }
    }

    fn from_example(example: &CalibrationExample) -> Self {
        let prompt = (example.question.prompt != DEFAULT_PROMPT).then(|| example.question.prompt.clone());
        Self {
            id: example.question.id.clone(),
            tokens: example.question.tokens.clone(),
            scores: example.scores.0.clone(),
            explanation_indices: example.explanation.indices.iter().copied().collect(),
            answer: example.answer.clone(),
            prompt,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Clamp out-of-range scores into `[0, 1]` instead of rejecting the record.
    pub clamp_scores: bool,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    load_dataset_with(path, LoadOptions::default())
}

pub fn load_dataset_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    parse_dataset(BufReader::new(file), &display, options)
}

/// Parses JSON Lines from any reader. Blank lines are skipped.
pub fn parse_dataset(reader: impl BufRead, source: &str, options: LoadOptions) -> Result<Dataset, DatasetError> {
    let mut parsed = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source_err| DatasetError::Io {
            path: source.to_string(),
            source: source_err,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            path: source.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        let mut example = record.into_example();
        if options.clamp_scores {
            for v in &mut example.scores.0 {
                if !v.is_nan() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
        parsed.push((line_no, example));
    }
    if parsed.is_empty() {
        return Err(DatasetError::Empty(source.to_string()));
    }

    let verdicts: Vec<Verdict> = parsed.par_iter().map(|(_, ex)| validate_example(ex)).collect();
    if let Some(pos) = verdicts.iter().position(|v| !v.is_valid()) {
        let (line, example) = &parsed[pos];
        return Err(DatasetError::Invalid {
            path: source.to_string(),
            line: *line,
            id: example.question.id.clone(),
            verdict: verdicts[pos].clone(),
        });
    }

    Ok(Dataset::new(
        parsed.into_iter().map(|(_, ex)| ex).collect(),
        source,
    ))
}

/// Serializes a dataset as JSON Lines (one record per line, trailing newline).
pub fn dataset_to_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    for example in &dataset.examples {
        let record = Record::from_example(example);
        out.push_str(&serde_json::to_string(&record).expect("record serialization is infallible"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_atomic(path.as_ref(), dataset_to_jsonl(dataset).as_bytes())?;
    Ok(())
}

/// Uniformly permutes the examples under `seed`, then cuts the first
/// `round(fraction * n)` off as the calibration side.
pub fn split_dataset(data: &Dataset, calibration_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DatasetError> {
    if !(calibration_fraction > 0.0 && calibration_fraction < 1.0) {
        return Err(DatasetError::BadFraction(calibration_fraction));
    }
    let n = data.len();
    let n_cal = (calibration_fraction * n as f64).round() as usize;
    if n_cal == 0 || n_cal >= n {
        return Err(DatasetError::EmptySide {
            n,
            fraction: calibration_fraction,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let pick = |idx: &[usize]| idx.iter().map(|&i| data.examples[i].clone()).collect::<Vec<_>>();
    let calibration = Dataset::new(pick(&order[..n_cal]), format!("{}#calibration", data.source_path));
    let test = Dataset::new(pick(&order[n_cal..]), format!("{}#test", data.source_path));
    Ok((calibration, test))
}
