//! Robust explanation sets under bounded synonym substitution.
//!
//! The perturbation ball of a question holds every question that differs
//! from it in at most `d` positions, where each changed token is replaced by
//! a synonym of the original. The robust score of a candidate token at
//! position `j` is the largest score the scorer assigns to position `j` over
//! all ball members carrying that candidate there; the robust set keeps every
//! `(position, candidate)` pair whose robust score clears `1 - lambda`.
//!
//! Because the lexicon is symmetric, a clean question lies inside the ball of
//! any of its noisy variants, so every clean token the plain set would select
//! also lands in the robust set built from the noisy question.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{coverage_loss, CalibrationResult};
use crate::dataset::{GroundTruthExplanation, TokenizedQuestion};
use crate::scorer::{ScoreError, Scorer};
use crate::sets::{check_lambda, is_selected, SetError, UncertaintySet};

#[derive(Debug, Error)]
pub enum RobustError {
    #[error(
        "perturbation ball has {ball_size} elements, above the enumeration budget of {budget}; \
         raise the budget or use coordinatewise mode with a context-free scorer"
    )]
    BudgetExceeded { ball_size: u128, budget: u128 },
    #[error("noise budget d={d} exceeds question length {k}")]
    RadiusTooLarge { d: usize, k: usize },
    #[error("position {position} is out of range for a {k}-token question")]
    PositionOutOfRange { position: usize, k: usize },
    #[error("'{candidate}' is not a synonym of '{observed}' at position {position}")]
    NotASynonym {
        position: usize,
        candidate: String,
        observed: String,
    },
    #[error("coordinatewise mode needs a context-free scorer; '{0}' is context-dependent")]
    ContextDependentScorer(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Set(#[from] SetError),
    #[error("cannot read lexicon {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Per-token synonym sets. Every set contains its own key, and membership is
/// symmetric: `b` in `syn(a)` implies `a` in `syn(b)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LexiconRepair {
    InsertedSelf { token: String },
    InsertedReverse { token: String, synonym: String },
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LexiconRecord {
    token: String,
    synonyms: Vec<String>,
}

impl SynonymLexicon {
    /// Builds a lexicon, inserting missing self-entries and reverse edges.
    /// Returns the repairs that were needed.
    pub fn from_entries<I, S>(entries: I) -> (Self, Vec<LexiconRepair>)
    where
        I: IntoIterator<Item = (String, S)>,
        S: IntoIterator<Item = String>,
    {
        let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (token, synonyms) in entries {
            map.entry(token).or_default().extend(synonyms);
        }
        let mut repairs = Vec::new();
        let edges: Vec<(String, String)> = map
            .iter()
            .flat_map(|(t, syns)| syns.iter().map(move |s| (t.clone(), s.clone())))
            .collect();
        for (token, synonym) in edges {
            if token != synonym {
                let back = map.entry(synonym.clone()).or_default();
                if back.insert(token.clone()) {
                    repairs.push(LexiconRepair::InsertedReverse {
                        token: synonym,
                        synonym: token,
                    });
                }
            }
        }
        for (token, syns) in map.iter_mut() {
            if syns.insert(token.clone()) {
                repairs.push(LexiconRepair::InsertedSelf { token: token.clone() });
            }
        }
        (Self { entries: map }, repairs)
    }

    /// Reads `{"token": ..., "synonyms": [...]}` records, one per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RobustError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| RobustError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| RobustError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LexiconRecord = serde_json::from_str(&line).map_err(|e| RobustError::Malformed {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if rec.token.is_empty() || rec.synonyms.iter().any(String::is_empty) {
                return Err(RobustError::Malformed {
                    line: idx + 1,
                    message: "tokens and synonyms must be non-empty".into(),
                });
            }
            records.push((rec.token, rec.synonyms));
        }
        let (lexicon, repairs) = Self::from_entries(records);
        for repair in &repairs {
            match repair {
                LexiconRepair::InsertedSelf { token } => {
                    log::warn!("lexicon entry '{token}' did not list itself; inserted")
                }
                LexiconRepair::InsertedReverse { token, synonym } => {
                    log::warn!("lexicon: added '{synonym}' to synonyms of '{token}' for symmetry")
                }
            }
        }
        Ok(lexicon)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (token, syns) in &self.entries {
            let rec = LexiconRecord {
                token: token.clone(),
                synonyms: syns.iter().cloned().collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Synonym set of `token`, itself included; `{token}` when absent.
    pub fn synonyms(&self, token: &str) -> BTreeSet<String> {
        self.entries
            .get(token)
            .cloned()
            .unwrap_or_else(|| BTreeSet::from([token.to_string()]))
    }

    /// Synonyms of `token` other than `token`, in sorted order.
    pub fn alternatives(&self, token: &str) -> Vec<String> {
        self.entries
            .get(token)
            .map(|s| s.iter().filter(|t| *t != token).cloned().collect())
            .unwrap_or_default()
    }

    pub fn contains(&self, token: &str, candidate: &str) -> bool {
        token == candidate || self.entries.get(token).is_some_and(|s| s.contains(candidate))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn synonym_set(lexicon: &SynonymLexicon, token: &str) -> BTreeSet<String> {
    lexicon.synonyms(token)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallMode {
    /// Enumerate the whole ball and score every member.
    Exact,
    /// One scoring call per candidate; valid only for context-free scorers.
    Coordinatewise,
}

pub const DEFAULT_ENUMERATION_BUDGET: u128 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallSpec {
    pub d: usize,
    pub enumeration_budget: u128,
    pub mode: BallMode,
}

impl BallSpec {
    pub fn exact(d: usize) -> Self {
        Self {
            d,
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
            mode: BallMode::Exact,
        }
    }

    pub fn coordinatewise(d: usize) -> Self {
        Self {
            mode: BallMode::Coordinatewise,
            ..Self::exact(d)
        }
    }
}

fn check_radius(question: &TokenizedQuestion, d: usize) -> Result<(), RobustError> {
    if d > question.len() {
        Err(RobustError::RadiusTooLarge { d, k: question.len() })
    } else {
        Ok(())
    }
}

/// Number of ball members, by expanding `prod_j (1 + a_j x)` up to `x^d`
/// where `a_j` is the number of alternatives at position `j`. Saturates at
/// `u128::MAX`.
pub fn ball_size(question: &TokenizedQuestion, lexicon: &SynonymLexicon, d: usize) -> u128 {
    let d = d.min(question.len());
    let mut coeffs = vec![0u128; d + 1];
    coeffs[0] = 1;
    for token in &question.tokens {
        let a = lexicon.alternatives(token).len() as u128;
        if a == 0 {
            continue;
        }
        for m in (1..=d).rev() {
            coeffs[m] = coeffs[m].saturating_add(coeffs[m - 1].saturating_mul(a));
        }
    }
    coeffs.iter().fold(0u128, |acc, &c| acc.saturating_add(c))
}

/// Iterator over a perturbation ball. Yields the question itself first, then
/// members by increasing number of changed positions; within a size, position
/// subsets in lexicographic order, then synonym choices in lexicographic
/// order of their sorted alternative lists.
#[derive(Debug, Clone)]
pub struct BallIter {
    base: TokenizedQuestion,
    options: Vec<(usize, Vec<String>)>,
    max_changes: usize,
    combo: Vec<usize>,
    choice: Vec<usize>,
    done: bool,
}

impl BallIter {
    fn new(question: &TokenizedQuestion, lexicon: &SynonymLexicon, d: usize) -> Self {
        let options: Vec<(usize, Vec<String>)> = question
            .tokens
            .iter()
            .enumerate()
            .map(|(j, t)| (j, lexicon.alternatives(t)))
            .filter(|(_, alts)| !alts.is_empty())
            .collect();
        Self {
            max_changes: d.min(options.len()),
            base: question.clone(),
            options,
            combo: Vec::new(),
            choice: Vec::new(),
            done: false,
        }
    }

    fn current(&self) -> TokenizedQuestion {
        let mut q = self.base.clone();
        for (&c, &s) in self.combo.iter().zip(&self.choice) {
            let (position, alts) = &self.options[c];
            q.tokens[*position] = alts[s].clone();
        }
        q
    }

    fn advance(&mut self) {
        for i in (0..self.choice.len()).rev() {
            self.choice[i] += 1;
            if self.choice[i] < self.options[self.combo[i]].1.len() {
                return;
            }
            self.choice[i] = 0;
        }
        let n = self.options.len();
        let m = self.combo.len();
        if let Some(i) = (0..m).rev().find(|&i| self.combo[i] < n - m + i) {
            self.combo[i] += 1;
            for j in i + 1..m {
                self.combo[j] = self.combo[j - 1] + 1;
            }
        } else if m < self.max_changes {
            self.combo = (0..m + 1).collect();
            self.choice = vec![0; m + 1];
        } else {
            self.done = true;
        }
    }
}

impl Iterator for BallIter {
    type Item = TokenizedQuestion;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let out = self.current();
        self.advance();
        Some(out)
    }
}

/// Enumerates the ball, failing fast when it exceeds the budget.
pub fn enumerate_ball(question: &TokenizedQuestion, lexicon: &SynonymLexicon, spec: &BallSpec) -> Result<BallIter, RobustError> {
    check_radius(question, spec.d)?;
    let size = ball_size(question, lexicon, spec.d);
    if size > spec.enumeration_budget {
        return Err(RobustError::BudgetExceeded {
            ball_size: size,
            budget: spec.enumeration_budget,
        });
    }
    Ok(BallIter::new(question, lexicon, spec.d))
}

/// True when `candidate` is within `d` synonym substitutions of `clean`.
pub fn in_ball(clean: &TokenizedQuestion, candidate: &TokenizedQuestion, lexicon: &SynonymLexicon, d: usize) -> bool {
    if clean.tokens.len() != candidate.tokens.len() {
        return false;
    }
    let mut changed = 0;
    for (c, t) in clean.tokens.iter().zip(&candidate.tokens) {
        if c != t {
            if !lexicon.contains(c, t) {
                return false;
            }
            changed += 1;
        }
    }
    changed <= d
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BallStats {
    pub ball_size: u64,
    pub questions_scored: u64,
    pub upstream_calls: u64,
    pub cache_hits: u64,
}

/// Robust score of every reachable `(position, candidate)` pair.
pub type RobustScores = BTreeMap<(usize, String), f64>;

fn score_all(scorer: &dyn Scorer, questions: &[TokenizedQuestion]) -> Result<Vec<Vec<f64>>, RobustError> {
    questions
        .par_iter()
        .map(|q| scorer.score(q).map(|s| s.0).map_err(RobustError::from))
        .collect()
}

fn max_into(scores: &mut RobustScores, position: usize, token: &str, value: f64) {
    scores
        .entry((position, token.to_string()))
        .and_modify(|v| *v = v.max(value))
        .or_insert(value);
}

/// Computes robust scores for all candidates reachable within the ball.
pub fn robust_scores(
    question: &TokenizedQuestion,
    lexicon: &SynonymLexicon,
    spec: &BallSpec,
    scorer: &dyn Scorer,
) -> Result<(RobustScores, BallStats), RobustError> {
    check_radius(question, spec.d)?;
    let before = scorer.stats();
    let size = ball_size(question, lexicon, spec.d);
    let mut out = RobustScores::new();
    let members: Vec<TokenizedQuestion> = match spec.mode {
        BallMode::Exact => enumerate_ball(question, lexicon, spec)?.collect(),
        BallMode::Coordinatewise => {
            if !scorer.is_context_free() {
                return Err(RobustError::ContextDependentScorer(scorer.identity()));
            }
            // For a context-free scorer the score at j depends only on the
            // token at j, so one member per (j, candidate) attains the max.
            let mut members = vec![question.clone()];
            if spec.d >= 1 {
                for (j, token) in question.tokens.iter().enumerate() {
                    for alt in lexicon.alternatives(token) {
                        members.push(question.with_token(j, &alt));
                    }
                }
            }
            members
        }
    };
    let scored = score_all(scorer, &members)?;
    match spec.mode {
        BallMode::Exact => {
            for (member, scores) in members.iter().zip(&scored) {
                for (j, token) in member.tokens.iter().enumerate() {
                    max_into(&mut out, j, token, scores[j]);
                }
            }
        }
        BallMode::Coordinatewise => {
            let (first, rest) = scored.split_first().expect("observed question is scored");
            for (j, token) in question.tokens.iter().enumerate() {
                max_into(&mut out, j, token, first[j]);
            }
            for (member, scores) in members[1..].iter().zip(rest) {
                let j = member
                    .tokens
                    .iter()
                    .zip(&question.tokens)
                    .position(|(a, b)| a != b)
                    .expect("member differs in one position");
                max_into(&mut out, j, &member.tokens[j], scores[j]);
            }
        }
    }
    let after = scorer.stats();
    let stats = BallStats {
        ball_size: u64::try_from(size).unwrap_or(u64::MAX),
        questions_scored: members.len() as u64,
        upstream_calls: after.upstream_calls - before.upstream_calls,
        cache_hits: after.cache_hits - before.cache_hits,
    };
    Ok((out, stats))
}

/// Supremum of the score at `position` over ball members that carry
/// `candidate` there. Negative infinity when no member does (only possible
/// with `d = 0` and a candidate other than the observed token).
pub fn robust_score(
    question: &TokenizedQuestion,
    position: usize,
    candidate: &str,
    lexicon: &SynonymLexicon,
    spec: &BallSpec,
    scorer: &dyn Scorer,
) -> Result<f64, RobustError> {
    check_radius(question, spec.d)?;
    let observed = question.tokens.get(position).ok_or(RobustError::PositionOutOfRange {
        position,
        k: question.len(),
    })?;
    if !lexicon.contains(observed, candidate) {
        return Err(RobustError::NotASynonym {
            position,
            candidate: candidate.to_string(),
            observed: observed.clone(),
        });
    }
    let members: Vec<TokenizedQuestion> = match spec.mode {
        BallMode::Exact => enumerate_ball(question, lexicon, spec)?
            .filter(|m| m.tokens[position] == candidate)
            .collect(),
        BallMode::Coordinatewise => {
            if !scorer.is_context_free() {
                return Err(RobustError::ContextDependentScorer(scorer.identity()));
            }
            if candidate == observed || spec.d >= 1 {
                vec![question.with_token(position, candidate)]
            } else {
                Vec::new()
            }
        }
    };
    let scored = score_all(scorer, &members)?;
    Ok(scored.iter().map(|s| s[position]).fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustItem {
    pub position: usize,
    pub candidate: String,
    pub robust_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustUncertaintySet {
    pub question_id: String,
    /// Sorted by `(position, candidate)`.
    pub items: Vec<RobustItem>,
    pub lambda_used: f64,
    pub mode: BallMode,
    pub stats: BallStats,
}

impl RobustUncertaintySet {
    pub fn contains(&self, position: usize, token: &str) -> bool {
        self.items
            .binary_search_by(|it| (it.position, it.candidate.as_str()).cmp(&(position, token)))
            .is_ok()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct positions with at least one selected candidate.
    pub fn positions(&self) -> BTreeSet<usize> {
        self.items.iter().map(|it| it.position).collect()
    }

    /// True when every `(position, token)` of `plain` appears here.
    pub fn covers(&self, plain: &UncertaintySet) -> bool {
        plain.tokens.iter().all(|(j, t)| self.contains(*j, t))
    }
}

/// Robust set at an arbitrary threshold.
pub fn build_robust_set_at(
    question: &TokenizedQuestion,
    lexicon: &SynonymLexicon,
    spec: &BallSpec,
    scorer: &dyn Scorer,
    lambda: f64,
) -> Result<RobustUncertaintySet, RobustError> {
    check_lambda(lambda)?;
    let (scores, stats) = robust_scores(question, lexicon, spec, scorer)?;
    let items = scores
        .into_iter()
        .filter(|(_, r)| is_selected(*r, lambda))
        .map(|((position, candidate), robust_score)| RobustItem {
            position,
            candidate,
            robust_score,
        })
        .collect();
    Ok(RobustUncertaintySet {
        question_id: question.id.clone(),
        items,
        lambda_used: lambda,
        mode: spec.mode,
        stats,
    })
}

/// Robust set at the calibrated threshold.
pub fn build_robust_set(
    question: &TokenizedQuestion,
    lexicon: &SynonymLexicon,
    spec: &BallSpec,
    scorer: &dyn Scorer,
    calibration: &CalibrationResult,
) -> Result<RobustUncertaintySet, RobustError> {
    build_robust_set_at(question, lexicon, spec, scorer, calibration.lambda_hat)
}

/// Loss of a robust set against the clean question's ground truth, matching
/// `(position, clean token)` exactly.
pub fn robust_loss(set: &RobustUncertaintySet, clean: &TokenizedQuestion, truth: &GroundTruthExplanation) -> Result<f64, RobustError> {
    let covered = truth
        .indices
        .iter()
        .filter(|&&j| clean.tokens.get(j).is_some_and(|t| set.contains(j, t)))
        .count();
    coverage_loss(covered, truth.len()).ok_or(RobustError::Set(SetError::EmptyTruth))
}

/// Replaces up to `d` perturbable positions (those with at least one
/// alternative) with a uniformly chosen alternative, deterministically in
/// `seed`.
pub fn inject_noise(clean: &TokenizedQuestion, lexicon: &SynonymLexicon, d: usize, seed: u64) -> TokenizedQuestion {
    let perturbable: Vec<(usize, Vec<String>)> = clean
        .tokens
        .iter()
        .enumerate()
        .map(|(j, t)| (j, lexicon.alternatives(t)))
        .filter(|(_, alts)| !alts.is_empty())
        .collect();
    let count = d.min(perturbable.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = clean.clone();
    let mut picked: Vec<usize> = sample(&mut rng, perturbable.len(), count).into_vec();
    picked.sort_unstable();
    for idx in picked {
        let (j, alts) = &perturbable[idx];
        noisy.tokens[*j] = alts[rng.random_range(0..alts.len())].clone();
    }
    noisy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustPredictionRecord {
    pub id: String,
    pub lambda: f64,
    pub items: Vec<RobustItem>,
    pub mode: BallMode,
    pub ball_size: u64,
    pub questions_scored: u64,
    pub scorer_calls: u64,
    pub cache_hits: u64,
}

impl From<&RobustUncertaintySet> for RobustPredictionRecord {
    fn from(set: &RobustUncertaintySet) -> Self {
        Self {
            id: set.question_id.clone(),
            lambda: set.lambda_used,
            items: set.items.clone(),
            mode: set.mode,
            ball_size: set.stats.ball_size,
            questions_scored: set.stats.questions_scored,
            scorer_calls: set.stats.upstream_calls,
            cache_hits: set.stats.cache_hits,
        }
    }
}
