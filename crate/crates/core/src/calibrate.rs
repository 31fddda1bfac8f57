//! Coverage loss, empirical risk and threshold calibration.
//!
//! The per-example loss is the fraction of ground-truth tokens missing from
//! the set. Its calibration mean `R(lambda)` is a non-increasing,
//! right-continuous step function. The calibrated threshold is the smallest
//! `lambda` with `R(lambda) <= alpha - (1 - alpha) / n`, or `1` when no
//! threshold qualifies.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CalibrationExample, GroundTruthExplanation};
use crate::numeric::pairwise_sum;
use crate::sets::{is_selected, UncertaintySet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrateError {
    #[error("no calibration examples")]
    NoExamples,
    #[error("ground-truth explanation is empty")]
    EmptyTruth,
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("lambda must lie in [0, 1], got {0}")]
    BadLambda(f64),
    #[error("invalid threshold grid: {0}")]
    BadGrid(String),
}

/// `1 - covered / truth_size`; `None` when the truth is empty.
pub fn coverage_loss(covered: usize, truth_size: usize) -> Option<f64> {
    (truth_size > 0).then(|| 1.0 - covered as f64 / truth_size as f64)
}

pub fn loss(set: &UncertaintySet, truth: &GroundTruthExplanation) -> Result<f64, CalibrateError> {
    let covered = truth.indices.intersection(&set.indices).count();
    coverage_loss(covered, truth.len()).ok_or(CalibrateError::EmptyTruth)
}

/// Loss of the set built from `example` at `lambda`, without materializing
/// the set. Only ground-truth positions can change the loss.
pub fn example_loss(example: &CalibrationExample, lambda: f64) -> f64 {
    let scores = example.scores.values();
    let covered = example
        .explanation
        .indices
        .iter()
        .filter(|&&j| is_selected(scores[j], lambda))
        .count();
    coverage_loss(covered, example.explanation.len()).unwrap_or(0.0)
}

fn check_examples(examples: &[CalibrationExample]) -> Result<(), CalibrateError> {
    if examples.is_empty() {
        return Err(CalibrateError::NoExamples);
    }
    if examples.iter().any(|ex| ex.explanation.is_empty()) {
        return Err(CalibrateError::EmptyTruth);
    }
    Ok(())
}

fn risk_unchecked(examples: &[CalibrationExample], lambda: f64) -> f64 {
    let losses: Vec<f64> = if examples.len() >= 512 {
        examples.par_iter().map(|ex| example_loss(ex, lambda)).collect()
    } else {
        examples.iter().map(|ex| example_loss(ex, lambda)).collect()
    };
    pairwise_sum(&losses) / examples.len() as f64
}

pub fn empirical_risk(examples: &[CalibrationExample], lambda: f64) -> Result<f64, CalibrateError> {
    check_examples(examples)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CalibrateError::BadLambda(lambda));
    }
    Ok(risk_unchecked(examples, lambda))
}

/// `alpha - (1 - alpha) / n`. Negative for small `n`, which makes every
/// threshold infeasible.
pub fn adjusted_bound(alpha: f64, n: usize) -> f64 {
    alpha - (1.0 - alpha) / n as f64
}

/// Smallest `lambda` in `[0, 1]` at which a token scored `score` enters the
/// set under floating-point evaluation of `score >= 1 - lambda`.
///
/// `1 - score` alone is not enough: the subtraction rounds, and the rule is
/// evaluated in floating point, so the exact jump point is found by bisecting
/// the bit patterns of non-negative doubles (which order like the values).
pub fn critical_threshold(score: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&score));
    let (mut lo, mut hi) = (0u64, 1.0f64.to_bits());
    if is_selected(score, 0.0) {
        return 0.0;
    }
    // invariant: rule false at lo, true at hi
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if is_selected(score, f64::from_bits(mid)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    f64::from_bits(hi)
}

/// Sorted, deduplicated jump points of the empirical risk, plus 0 and 1.
pub fn critical_thresholds(examples: &[CalibrationExample]) -> Result<Vec<f64>, CalibrateError> {
    if examples.is_empty() {
        return Err(CalibrateError::NoExamples);
    }
    let mut out: Vec<f64> = examples
        .iter()
        .flat_map(|ex| ex.scores.values().iter().copied())
        .filter(|s| (0.0..=1.0).contains(s))
        .map(critical_threshold)
        .chain([0.0, 1.0])
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    Exact,
    Grid,
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Grid => "grid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub lambda_hat: f64,
    pub alpha: f64,
    pub n: usize,
    pub adjusted_bound: f64,
    /// Whether some threshold met the bound. When false, `lambda_hat` is 1.
    pub feasible: bool,
    pub mode: CalibrationMode,
    #[serde(default)]
    pub grid_size: Option<usize>,
    /// Calibration risk at `lambda_hat`.
    pub empirical_risk: f64,
    /// Identity of the scorer that produced the calibration scores.
    #[serde(default)]
    pub scorer: Option<String>,
}

impl CalibrationResult {
    pub fn with_scorer(mut self, identity: impl Into<String>) -> Self {
        self.scorer = Some(identity.into());
        self
    }
}

fn check_alpha(alpha: f64) -> Result<(), CalibrateError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CalibrateError::BadAlpha(alpha))
    }
}

fn finish(
    examples: &[CalibrationExample],
    alpha: f64,
    bound: f64,
    candidate: Option<f64>,
    mode: CalibrationMode,
    grid_size: Option<usize>,
) -> CalibrationResult {
    let (lambda_hat, feasible) = match candidate {
        Some(l) => (l, true),
        None => (1.0, false),
    };
    CalibrationResult {
        lambda_hat,
        alpha,
        n: examples.len(),
        adjusted_bound: bound,
        feasible,
        mode,
        grid_size,
        empirical_risk: risk_unchecked(examples, lambda_hat),
        scorer: None,
    }
}

/// Exact calibration over the critical thresholds. Since the risk is
/// constant between consecutive jump points, the smallest feasible jump point
/// is the infimum of the feasible set.
pub fn calibrate_exact(examples: &[CalibrationExample], alpha: f64) -> Result<CalibrationResult, CalibrateError> {
    check_examples(examples)?;
    check_alpha(alpha)?;
    let bound = adjusted_bound(alpha, examples.len());
    let thresholds = critical_thresholds(examples)?;
    // risk is non-increasing, so infeasible points form a prefix
    let first = thresholds.partition_point(|&l| risk_unchecked(examples, l) > bound);
    let candidate = thresholds.get(first).copied();
    Ok(finish(examples, alpha, bound, candidate, CalibrationMode::Exact, None))
}

fn check_grid(grid: &[f64]) -> Result<(), CalibrateError> {
    if grid.is_empty() {
        return Err(CalibrateError::BadGrid("empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(CalibrateError::BadGrid(format!("{bad} is outside [0, 1]")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CalibrateError::BadGrid("not strictly ascending".into()));
    }
    if *grid.last().unwrap() != 1.0 {
        return Err(CalibrateError::BadGrid("last element must be 1".into()));
    }
    Ok(())
}

/// Binary search over an explicit ascending grid ending at 1: keep `low`
/// and `high` indices, probe the midpoint, move `high` down onto feasible
/// probes and `low` past infeasible ones.
pub fn calibrate_grid(examples: &[CalibrationExample], alpha: f64, grid: &[f64]) -> Result<CalibrationResult, CalibrateError> {
    check_examples(examples)?;
    check_alpha(alpha)?;
    check_grid(grid)?;
    let bound = adjusted_bound(alpha, examples.len());

    let (mut low, mut high) = (0usize, grid.len() - 1);
    while low < high {
        let mid = (low + high) / 2;
        if risk_unchecked(examples, grid[mid]) <= bound {
            high = mid;
        } else {
            low = mid + 1;
        }
    }
    let candidate = (risk_unchecked(examples, grid[low]) <= bound).then_some(grid[low]);
    Ok(finish(examples, alpha, bound, candidate, CalibrationMode::Grid, Some(grid.len())))
}

pub const DEFAULT_GRID_SIZE: usize = 1001;

/// `size` evenly spaced points from 0 to 1 inclusive.
pub fn uniform_grid(size: usize) -> Vec<f64> {
    match size {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => {
            let steps = (size - 1) as f64;
            (0..size).map(|i| i as f64 / steps).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCurve {
    pub thresholds: Vec<f64>,
    pub risks: Vec<f64>,
    pub n: usize,
}

impl RiskCurve {
    /// CSV with header `lambda,risk,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,risk,n\n");
        for (l, r) in self.thresholds.iter().zip(&self.risks) {
            out.push_str(&format!("{l},{r},{}\n", self.n));
        }
        out
    }

    pub fn is_monotone(&self) -> bool {
        self.thresholds.windows(2).all(|w| w[0] < w[1]) && self.risks.windows(2).all(|w| w[0] >= w[1])
    }
}

pub fn risk_curve(examples: &[CalibrationExample], grid: &[f64]) -> Result<RiskCurve, CalibrateError> {
    check_examples(examples)?;
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(CalibrateError::BadGrid("must be strictly ascending within [0, 1]".into()));
    }
    let risks = grid.par_iter().map(|&l| risk_unchecked(examples, l)).collect();
    Ok(RiskCurve {
        thresholds: grid.to_vec(),
        risks,
        n: examples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImportanceScores, TokenizedQuestion};
    use crate::sets::build_set;
    use proptest::prelude::*;

    fn example(scores: &[f64], truth: &[usize]) -> CalibrationExample {
        CalibrationExample {
            question: TokenizedQuestion::new("q", (0..scores.len()).map(|i| format!("t{i}")).collect()),
            scores: ImportanceScores(scores.to_vec()),
            explanation: GroundTruthExplanation::new(truth.iter().copied()),
            answer: None,
        }
    }

    fn set_of(indices: &[usize]) -> UncertaintySet {
        UncertaintySet {
            question_id: "q".into(),
            indices: indices.iter().copied().collect(),
            tokens: Vec::new(),
            lambda_used: 0.5,
            scorer: None,
        }
    }

    #[test]
    fn loss_examples() {
        let truth = GroundTruthExplanation::new([0, 1, 2, 3]);
        assert_eq!(loss(&set_of(&[0, 1]), &truth).unwrap(), 0.5);
        assert_eq!(loss(&set_of(&[0, 1, 2, 3, 4]), &truth).unwrap(), 0.0);
        assert_eq!(loss(&set_of(&[5]), &truth).unwrap(), 1.0);
        assert_eq!(loss(&set_of(&[0]), &GroundTruthExplanation::default()), Err(CalibrateError::EmptyTruth));
    }

    #[test]
    fn risk_examples() {
        // losses 0.0 and 0.5 at lambda = 0.5
        let exs = [example(&[0.9, 0.1], &[0]), example(&[0.9, 0.1], &[0, 1])];
        assert_eq!(empirical_risk(&exs, 0.5).unwrap(), 0.25);
        assert_eq!(empirical_risk(&exs, 1.0).unwrap(), 0.0);
        assert_eq!(empirical_risk(&[example(&[1.0, 0.0], &[0])], 0.5).unwrap(), 0.0);
        assert_eq!(empirical_risk(&[], 0.5), Err(CalibrateError::NoExamples));
        assert_eq!(empirical_risk(&exs, 1.5), Err(CalibrateError::BadLambda(1.5)));
    }

    #[test]
    fn bound_examples() {
        assert!((adjusted_bound(0.5, 10) - 0.45).abs() < 1e-15);
        assert!((adjusted_bound(0.1, 1) + 0.8).abs() < 1e-15);
        // independent route: (alpha * (n + 1) - 1) / n
        let alt = (0.45 * 100.0 - 1.0) / 99.0;
        assert!((adjusted_bound(0.45, 99) - alt).abs() < 1e-15);
        assert!((adjusted_bound(0.45, 99) - 0.444_444).abs() < 1e-6);
    }

    #[test]
    fn critical_threshold_examples() {
        let exs = [example(&[0.9, 0.5], &[0]), example(&[0.2], &[0])];
        let t = critical_thresholds(&exs).unwrap();
        let expect = [0.0, 0.1, 0.5, 0.8, 1.0];
        assert_eq!(t.len(), 5);
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{t:?}");
        }
        let all_half = [example(&[0.5, 0.5], &[0])];
        let t = critical_thresholds(&all_half).unwrap();
        assert_eq!(t.len(), 3);
        // 1 - 0.49999999999999994 rounds to 0.5, so that is the jump point
        assert_eq!(t[1], 0.5f64.next_down());
        assert_eq!(critical_thresholds(&[]), Err(CalibrateError::NoExamples));
    }

    #[test]
    fn critical_threshold_is_the_exact_jump() {
        for s in [0.0, 1e-300, 0.1, 0.3, 0.7, 0.9999999999999999, 1.0, 0.123456789] {
            let c = critical_threshold(s);
            assert!(is_selected(s, c), "{s}");
            if c > 0.0 {
                assert!(!is_selected(s, c.next_down()), "{s}");
            }
        }
    }

    #[test]
    fn uniform_grid_shape() {
        let g = uniform_grid(1001);
        assert_eq!(g.len(), 1001);
        assert_eq!((g[0], g[500], g[1000]), (0.0, 0.5, 1.0));
        assert_eq!(uniform_grid(1), vec![1.0]);
    }

    #[test]
    fn infeasible_bound_falls_back_to_one() {
        let exs = [example(&[0.9, 0.1], &[0])];
        let r = calibrate_exact(&exs, 0.1).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.lambda_hat, 1.0);
        assert_eq!(r.adjusted_bound, adjusted_bound(0.1, 1));
        let g = calibrate_grid(&exs, 0.1, &uniform_grid(11)).unwrap();
        assert!(!g.feasible);
        assert_eq!(g.lambda_hat, 1.0);
    }

    #[test]
    fn perfect_scores_give_smallest_positive_threshold() {
        let exs: Vec<_> = (0..10).map(|i| example(&[1.0, 0.0, 1.0], &[0, 2 - 2 * (i % 2)])).collect();
        let r = calibrate_exact(&exs, 0.3).unwrap();
        // scores are exactly 0 or 1, so the only jump points are 0 and 1, and
        // the set at 0 already contains every score-1 token
        assert_eq!(r.lambda_hat, 0.0);
        assert_eq!(r.empirical_risk, 0.0);
    }

    #[test]
    fn single_point_grid() {
        let exs = [example(&[0.2, 0.4], &[0]), example(&[0.3, 0.9], &[1])];
        let r = calibrate_grid(&exs, 0.5, &[1.0]).unwrap();
        assert_eq!((r.lambda_hat, r.feasible), (1.0, true));
    }

    #[test]
    fn grid_validation() {
        let exs = [example(&[0.2], &[0])];
        for grid in [vec![], vec![0.5], vec![0.0, 0.0, 1.0], vec![-0.1, 1.0], vec![0.5, 0.2, 1.0]] {
            assert!(matches!(calibrate_grid(&exs, 0.5, &grid), Err(CalibrateError::BadGrid(_))), "{grid:?}");
        }
        assert_eq!(calibrate_exact(&exs, 1.0).unwrap_err(), CalibrateError::BadAlpha(1.0));
        assert_eq!(calibrate_exact(&[], 0.5).unwrap_err(), CalibrateError::NoExamples);
    }

    #[test]
    fn risk_curve_csv() {
        let exs = [example(&[0.9, 0.1], &[0, 1])];
        let curve = risk_curve(&exs, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(curve.to_csv(), "lambda,risk,n\n0,1,1\n0.5,0.5,1\n1,0,1\n");
        assert!(curve.is_monotone());
    }

    #[test]
    fn loss_fast_path_matches_built_set() {
        let ex = example(&[0.9, 0.5, 0.2, 0.7], &[1, 2, 3]);
        for l in [0.0, 0.1, 0.3, 0.5, 0.8, 1.0] {
            let set = build_set(&ex.question, &ex.scores, l).unwrap();
            assert_eq!(example_loss(&ex, l), loss(&set, &ex.explanation).unwrap());
        }
    }

    fn arb_examples() -> impl Strategy<Value = Vec<CalibrationExample>> {
        let one = (1usize..8).prop_flat_map(|k| {
            (
                prop::collection::vec(prop_oneof![0.0f64..=1.0, Just(0.0), Just(1.0), Just(0.5)], k),
                prop::collection::btree_set(0..k, 1..=k),
            )
                .prop_map(|(s, t)| example(&s, &t.into_iter().collect::<Vec<_>>()))
        });
        prop::collection::vec(one, 1..20)
    }

    proptest! {
        #[test]
        fn exact_result_is_minimal(exs in arb_examples(), alpha in 0.01f64..0.99) {
            let r = calibrate_exact(&exs, alpha).unwrap();
            let bound = adjusted_bound(alpha, exs.len());
            let thresholds = critical_thresholds(&exs).unwrap();
            if r.feasible {
                prop_assert!(empirical_risk(&exs, r.lambda_hat).unwrap() <= bound);
            } else {
                prop_assert_eq!(r.lambda_hat, 1.0);
            }
            for &t in thresholds.iter().filter(|&&t| t < r.lambda_hat) {
                prop_assert!(empirical_risk(&exs, t).unwrap() > bound);
            }
            let g = calibrate_grid(&exs, alpha, &thresholds).unwrap();
            prop_assert_eq!(g.lambda_hat, r.lambda_hat);
            prop_assert_eq!(g.feasible, r.feasible);
        }

        #[test]
        fn risk_is_constant_between_jumps(exs in arb_examples(), u in 0.0f64..1.0) {
            let thresholds = critical_thresholds(&exs).unwrap();
            let i = thresholds.partition_point(|&t| t <= u) - 1;
            let left = thresholds[i];
            prop_assert_eq!(empirical_risk(&exs, u).unwrap(), empirical_risk(&exs, left).unwrap());
        }

        #[test]
        fn risk_curve_is_monotone(exs in arb_examples(), size in 2usize..200) {
            let curve = risk_curve(&exs, &uniform_grid(size)).unwrap();
            prop_assert!(curve.is_monotone());
            prop_assert_eq!(*curve.risks.last().unwrap(), 0.0);
        }
    }
}
