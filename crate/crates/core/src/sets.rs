//! Threshold-based explanation sets: a token is selected when its score is
//! at least `1 - lambda` (inclusive).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{coverage_loss, CalibrationResult};
use crate::dataset::{GroundTruthExplanation, ImportanceScores, TokenizedQuestion};
use crate::scorer::{ScoreError, Scorer};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SetError {
    #[error("{scores} scores for a {tokens}-token question")]
    DimensionMismatch { tokens: usize, scores: usize },
    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("calibrated with scorer '{calibrated}' but predicting with '{used}'")]
    ScorerMismatch { calibrated: String, used: String },
    #[error("set is for question '{set}' but ground truth is for '{truth}'")]
    QuestionMismatch { set: String, truth: String },
    #[error("ground-truth explanation is empty")]
    EmptyTruth,
}

/// The selection rule. Shared by every code path that decides membership.
#[inline]
pub fn is_selected(score: f64, lambda: f64) -> bool {
    score >= 1.0 - lambda
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySet {
    pub question_id: String,
    pub indices: BTreeSet<usize>,
    pub tokens: Vec<(usize, String)>,
    pub lambda_used: f64,
    /// Identity of the scorer that produced the scores, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<String>,
}

impl UncertaintySet {
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

pub(crate) fn check_lambda(lambda: f64) -> Result<(), SetError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(SetError::LambdaOutOfRange(lambda))
    }
}

pub fn build_set(question: &TokenizedQuestion, scores: &ImportanceScores, lambda: f64) -> Result<UncertaintySet, SetError> {
    check_lambda(lambda)?;
    if scores.len() != question.len() {
        return Err(SetError::DimensionMismatch {
            tokens: question.len(),
            scores: scores.len(),
        });
    }
    let indices: BTreeSet<usize> = scores
        .values()
        .iter()
        .enumerate()
        .filter(|&(_, &s)| is_selected(s, lambda))
        .map(|(j, _)| j)
        .collect();
    let tokens = indices.iter().map(|&j| (j, question.tokens[j].clone())).collect();
    Ok(UncertaintySet {
        question_id: question.id.clone(),
        indices,
        tokens,
        lambda_used: lambda,
        scorer: None,
    })
}

/// Checks that the scorer matches the one recorded at calibration time.
/// A mismatch breaks exchangeability; it is an error under `strict`, a
/// warning otherwise.
pub fn check_scorer_identity(scorer: &dyn Scorer, calibration: &CalibrationResult, strict: bool) -> Result<(), SetError> {
    let used = scorer.identity();
    match &calibration.scorer {
        Some(calibrated) if *calibrated != used => {
            if strict {
                return Err(SetError::ScorerMismatch {
                    calibrated: calibrated.clone(),
                    used,
                });
            }
            log::warn!("calibrated with scorer '{calibrated}' but predicting with '{used}'");
            Ok(())
        }
        _ => Ok(()),
    }
}

/// Scores a test question and selects tokens at the calibrated threshold.
pub fn predict(
    question: &TokenizedQuestion,
    scorer: &dyn Scorer,
    calibration: &CalibrationResult,
    strict: bool,
) -> Result<UncertaintySet, SetError> {
    check_scorer_identity(scorer, calibration, strict)?;
    let scores = scorer.score(question)?;
    let mut set = build_set(question, &scores, calibration.lambda_hat)?;
    set.scorer = Some(scorer.identity());
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub loss: f64,
    pub set_size: usize,
    pub truth_size: usize,
    pub covered: usize,
}

pub fn evaluate(set: &UncertaintySet, truth_id: &str, truth: &GroundTruthExplanation) -> Result<EvaluationReport, SetError> {
    if set.question_id != truth_id {
        return Err(SetError::QuestionMismatch {
            set: set.question_id.clone(),
            truth: truth_id.to_string(),
        });
    }
    let covered = truth.indices.intersection(&set.indices).count();
    let loss = coverage_loss(covered, truth.len()).ok_or(SetError::EmptyTruth)?;
    Ok(EvaluationReport {
        loss,
        set_size: set.len(),
        truth_size: truth.len(),
        covered,
    })
}

/// One line of the predictions JSON Lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub lambda: f64,
    pub indices: Vec<usize>,
    pub tokens: Vec<String>,
}

impl From<&UncertaintySet> for PredictionRecord {
    fn from(set: &UncertaintySet) -> Self {
        Self {
            id: set.question_id.clone(),
            lambda: set.lambda_used,
            indices: set.indices.iter().copied().collect(),
            tokens: set.tokens.iter().map(|(_, t)| t.clone()).collect(),
        }
    }
}
