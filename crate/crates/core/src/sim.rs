//! Synthetic data and Monte Carlo coverage experiments.
//!
//! Each trial draws a fresh i.i.d. dataset (so calibration and test points
//! are exchangeable), splits it, calibrates, and measures the mean test loss.
//! Trial `t` is seeded from `(master seed, t)` so any trial can be re-run on
//! its own.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{
    calibrate_exact, calibrate_grid, uniform_grid, CalibrateError, CalibrationMode, CalibrationResult,
    DEFAULT_GRID_SIZE,
};
use crate::dataset::{
    split_dataset, CalibrationExample, Dataset, DatasetError, GroundTruthExplanation, TokenizedQuestion,
};
use crate::numeric::{mean, standard_error};
use crate::robust::{build_robust_set, inject_noise, robust_loss, BallSpec, RobustError, SynonymLexicon};
use crate::scorer::{oracle_noise_score, truth_table, OracleNoiseScorer, Scorer};
use crate::sets::{build_set, evaluate, predict, SetError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Calibrate(#[from] CalibrateError),
    #[error(transparent)]
    Set(#[from] SetError),
    #[error(transparent)]
    Robust(#[from] RobustError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_calibration: usize,
    pub n_test: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Probability that a position belongs to the ground truth. At least
    /// one position is always marked.
    pub truth_fraction: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Alternatives per token in the synthetic lexicon.
    pub synonym_fanout: usize,
    /// Noise budget for robust experiments.
    pub d: usize,
    /// Number of synonym groups in the vocabulary.
    pub vocabulary: usize,
    pub grid_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_calibration: 100,
            n_test: 100,
            k_min: 8,
            k_max: 16,
            truth_fraction: 0.4,
            sigma: 0.3,
            seed: 0,
            synonym_fanout: 2,
            d: 1,
            vocabulary: 500,
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: &str| Err(SimError::Config(m.to_string()));
        if self.n_calibration == 0 || self.n_test == 0 {
            return fail("n_calibration and n_test must be positive");
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return fail("need 1 <= k_min <= k_max");
        }
        if !(self.truth_fraction > 0.0 && self.truth_fraction <= 1.0) {
            return fail("truth_fraction must lie in (0, 1]");
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return fail("sigma must be finite and >= 0");
        }
        if self.vocabulary == 0 {
            return fail("vocabulary must be positive");
        }
        if self.d > self.k_min {
            return fail("d must not exceed k_min");
        }
        if self.grid_size < 1 {
            return fail("grid_size must be positive");
        }
        Ok(())
    }

    fn scorer_seed(&self) -> u64 {
        derive_seed(self.seed, 0x5c0e)
    }

    pub fn scorer(&self, data: &Dataset) -> OracleNoiseScorer {
        OracleNoiseScorer::new(self.sigma, self.scorer_seed(), truth_table(data))
    }
}

/// SplitMix64 finalizer over `master + (index + 1) * golden`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn group_token(group: usize, member: usize) -> String {
    format!("g{group}m{member}")
}

/// Lexicon of disjoint synonym cliques, each with `fanout + 1` members.
pub fn synthetic_lexicon(config: &SyntheticConfig) -> SynonymLexicon {
    let size = config.synonym_fanout + 1;
    let entries = (0..config.vocabulary).flat_map(|g| {
        let members: Vec<String> = (0..size).map(|m| group_token(g, m)).collect();
        members.clone().into_iter().map(move |t| (t, members.clone()))
    });
    SynonymLexicon::from_entries(entries).0
}

/// Draws `n_calibration + n_test` i.i.d. examples scored by the oracle-noise
/// scorer at level `sigma`.
pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<Dataset, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_calibration + config.n_test;
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let k = rng.random_range(config.k_min..=config.k_max);
        let tokens = (0..k)
            .map(|_| {
                let group = rng.random_range(0..config.vocabulary);
                let member = rng.random_range(0..=config.synonym_fanout);
                group_token(group, member)
            })
            .collect();
        let mut truth: Vec<usize> = (0..k).filter(|_| rng.random_bool(config.truth_fraction)).collect();
        if truth.is_empty() {
            truth.push(rng.random_range(0..k));
        }
        let question = TokenizedQuestion::new(format!("syn-{i}"), tokens);
        let explanation = GroundTruthExplanation::new(truth);
        let scores = oracle_noise_score(&explanation, &question, config.sigma, config.scorer_seed());
        examples.push(CalibrationExample {
            question,
            scores,
            explanation,
            answer: None,
        });
    }
    Ok(Dataset::new(examples, format!("synthetic(seed={})", config.seed)))
}

fn calibrate_with(
    examples: &[CalibrationExample],
    alpha: f64,
    mode: CalibrationMode,
    grid_size: usize,
) -> Result<CalibrationResult, CalibrateError> {
    match mode {
        CalibrationMode::Exact => calibrate_exact(examples, alpha),
        CalibrationMode::Grid => calibrate_grid(examples, alpha, &uniform_grid(grid_size)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustTrial {
    pub mean_loss: f64,
    pub mean_set_size: f64,
    /// Plain sets built from the noisy questions.
    pub nonrobust_mean_loss: f64,
    pub nonrobust_mean_set_size: f64,
    /// Test questions whose robust set missed part of the clean plain set.
    pub superset_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub lambda_hat: f64,
    pub feasible: bool,
    pub mean_loss: f64,
    pub mean_set_size: f64,
    pub robust: Option<RobustTrial>,
}

/// Generate, split, calibrate, predict and evaluate once.
pub fn run_trial(config: &SyntheticConfig, alpha: f64, mode: CalibrationMode, robust: bool) -> Result<TrialResult, SimError> {
    let data = generate_synthetic_dataset(config)?;
    let fraction = config.n_calibration as f64 / data.len() as f64;
    let (cal, test) = split_dataset(&data, fraction, derive_seed(config.seed, 1))?;
    let scorer = config.scorer(&data);
    let calibration = calibrate_with(&cal.examples, alpha, mode, config.grid_size)?.with_scorer(scorer.identity());

    let mut losses = Vec::with_capacity(test.len());
    let mut sizes = Vec::with_capacity(test.len());
    for ex in &test.examples {
        let set = predict(&ex.question, &scorer, &calibration, true)?;
        let report = evaluate(&set, &ex.question.id, &ex.explanation)?;
        losses.push(report.loss);
        sizes.push(report.set_size as f64);
    }

    let robust = if robust {
        Some(robust_trial(config, &test, &scorer, &calibration)?)
    } else {
        None
    };

    Ok(TrialResult {
        seed: config.seed,
        lambda_hat: calibration.lambda_hat,
        feasible: calibration.feasible,
        mean_loss: mean(&losses).unwrap_or(0.0),
        mean_set_size: mean(&sizes).unwrap_or(0.0),
        robust,
    })
}

fn robust_trial(
    config: &SyntheticConfig,
    test: &Dataset,
    scorer: &OracleNoiseScorer,
    calibration: &CalibrationResult,
) -> Result<RobustTrial, SimError> {
    let lexicon = synthetic_lexicon(config);
    let spec = BallSpec::exact(config.d);
    let mut robust_losses = Vec::new();
    let mut robust_sizes = Vec::new();
    let mut plain_losses = Vec::new();
    let mut plain_sizes = Vec::new();
    let mut violations = 0;
    for (i, ex) in test.examples.iter().enumerate() {
        let clean = &ex.question;
        let noisy = inject_noise(clean, &lexicon, config.d, derive_seed(config.seed, 1_000 + i as u64));

        let robust = build_robust_set(&noisy, &lexicon, &spec, scorer, calibration)?;
        robust_losses.push(robust_loss(&robust, clean, &ex.explanation)?);
        robust_sizes.push(robust.len() as f64);

        let clean_set = build_set(clean, &scorer.score(clean).map_err(SetError::from)?, calibration.lambda_hat)?;
        if !robust.covers(&clean_set) {
            violations += 1;
        }

        // Plain set on the noisy question, scored against (position, clean token).
        let noisy_set = predict(&noisy, scorer, calibration, true)?;
        let covered = ex
            .explanation
            .indices
            .iter()
            .filter(|&&j| noisy_set.contains(j) && noisy.tokens[j] == clean.tokens[j])
            .count();
        plain_losses.push(1.0 - covered as f64 / ex.explanation.len() as f64);
        plain_sizes.push(noisy_set.len() as f64);
    }
    Ok(RobustTrial {
        mean_loss: mean(&robust_losses).unwrap_or(0.0),
        mean_set_size: mean(&robust_sizes).unwrap_or(0.0),
        nonrobust_mean_loss: mean(&plain_losses).unwrap_or(0.0),
        nonrobust_mean_set_size: mean(&plain_sizes).unwrap_or(0.0),
        superset_violations: violations,
    })
}

/// Side-by-side numbers for plain sets evaluated on the same noisy questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyComparator {
    pub nonrobust_mean_loss: f64,
    pub nonrobust_se: Option<f64>,
    pub nonrobust_mean_set_size: f64,
    pub superset_violations: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub mode: CalibrationMode,
    pub robust: bool,
    pub trials: usize,
    pub per_trial_losses: Vec<f64>,
    pub grand_mean_loss: f64,
    /// Standard error of the grand mean; `None` for a single trial.
    pub se: Option<f64>,
    pub mean_set_size: f64,
    pub mean_lambda: f64,
    pub feasibility_rate: f64,
    pub comparator: Option<NoisyComparator>,
}

impl CoverageReport {
    /// `grand_mean <= alpha + 3 * SE`; `None` when SE is undefined.
    pub fn within_bound(&self) -> Option<bool> {
        self.se.map(|se| self.grand_mean_loss <= self.alpha + 3.0 * se)
    }
}

pub fn run_coverage_experiment(
    config: &SyntheticConfig,
    alpha: f64,
    trials: usize,
    mode: CalibrationMode,
    robust: bool,
) -> Result<CoverageReport, SimError> {
    if trials == 0 {
        return Err(SimError::Config("trials must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CalibrateError::BadAlpha(alpha).into());
    }
    config.validate()?;
    let results: Vec<TrialResult> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let trial_config = SyntheticConfig {
                seed: derive_seed(config.seed, t),
                ..config.clone()
            };
            run_trial(&trial_config, alpha, mode, robust)
        })
        .collect::<Result<_, _>>()?;

    let pick = |f: &dyn Fn(&TrialResult) -> f64| results.iter().map(f).collect::<Vec<f64>>();
    let lambdas = pick(&|r| r.lambda_hat);
    let feasible = pick(&|r| if r.feasible { 1.0 } else { 0.0 });
    let (losses, sizes, comparator) = if robust {
        let rob = |f: &dyn Fn(&RobustTrial) -> f64| pick(&|r| f(r.robust.as_ref().expect("robust trial")));
        let plain_losses = rob(&|r| r.nonrobust_mean_loss);
        let comparator = NoisyComparator {
            nonrobust_mean_loss: mean(&plain_losses).unwrap_or(0.0),
            nonrobust_se: standard_error(&plain_losses),
            nonrobust_mean_set_size: mean(&rob(&|r| r.nonrobust_mean_set_size)).unwrap_or(0.0),
            superset_violations: results
                .iter()
                .map(|r| r.robust.as_ref().map_or(0, |x| x.superset_violations))
                .sum(),
            instances: trials * config.n_test,
        };
        (rob(&|r| r.mean_loss), rob(&|r| r.mean_set_size), Some(comparator))
    } else {
        (pick(&|r| r.mean_loss), pick(&|r| r.mean_set_size), None)
    };

    Ok(CoverageReport {
        alpha,
        mode,
        robust,
        trials,
        grand_mean_loss: mean(&losses).unwrap_or(0.0),
        se: standard_error(&losses),
        per_trial_losses: losses,
        mean_set_size: mean(&sizes).unwrap_or(0.0),
        mean_lambda: mean(&lambdas).unwrap_or(0.0),
        feasibility_rate: mean(&feasible).unwrap_or(0.0),
        comparator,
    })
}

pub const SUMMARY_COLUMNS: [&str; 9] = [
    "alpha",
    "mode",
    "robust",
    "trials",
    "mean_loss",
    "se",
    "mean_set_size",
    "mean_lambda",
    "feasibility_rate",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<Vec<String>>,
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = SUMMARY_COLUMNS.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// One row per report, in input order. An undefined SE is left empty.
pub fn summarize(reports: &[CoverageReport]) -> SummaryTable {
    let rows = reports
        .iter()
        .map(|r| {
            vec![
                r.alpha.to_string(),
                r.mode.to_string(),
                r.robust.to_string(),
                r.trials.to_string(),
                r.grand_mean_loss.to_string(),
                r.se.map(|s| s.to_string()).unwrap_or_default(),
                r.mean_set_size.to_string(),
                r.mean_lambda.to_string(),
                r.feasibility_rate.to_string(),
            ]
        })
        .collect();
    SummaryTable { rows }
}

/// Batch sweep read from a JSON experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    pub alphas: Vec<f64>,
    pub trials: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<CalibrationMode>,
    #[serde(default = "default_robust")]
    pub robust: Vec<bool>,
}

fn default_modes() -> Vec<CalibrationMode> {
    vec![CalibrationMode::Exact]
}

fn default_robust() -> Vec<bool> {
    vec![false]
}

/// Runs every (robust, mode, alpha) combination in that nesting order.
pub fn run_sweep(experiment: &ExperimentConfig) -> Result<Vec<CoverageReport>, SimError> {
    let mut reports = Vec::new();
    for &robust in &experiment.robust {
        for &mode in &experiment.modes {
            for &alpha in &experiment.alphas {
                reports.push(run_coverage_experiment(
                    &experiment.synthetic,
                    alpha,
                    experiment.trials,
                    mode,
                    robust,
                )?);
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate_example;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_calibration: 40,
            n_test: 40,
            k_min: 4,
            k_max: 8,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generated_examples_are_valid() {
        let cfg = SyntheticConfig {
            n_calibration: 3,
            n_test: 2,
            k_min: 4,
            k_max: 4,
            truth_fraction: 0.5,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 5);
        for ex in &ds.examples {
            assert_eq!(ex.question.len(), 4);
            assert!(validate_example(ex).is_valid());
        }
        assert_eq!(ds, generate_synthetic_dataset(&cfg).unwrap());
    }

    #[test]
    fn zero_noise_scores_are_indicators() {
        let cfg = SyntheticConfig { sigma: 0.0, ..small() };
        for ex in generate_synthetic_dataset(&cfg).unwrap().examples {
            for (j, &s) in ex.scores.values().iter().enumerate() {
                assert_eq!(s, if ex.explanation.contains(j) { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn truth_fraction_is_roughly_honored() {
        let cfg = SyntheticConfig {
            n_calibration: 500,
            n_test: 500,
            k_min: 10,
            k_max: 10,
            truth_fraction: 0.4,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic_dataset(&cfg).unwrap();
        let total: usize = ds.examples.iter().map(|e| e.explanation.len()).sum();
        let frac = total as f64 / (ds.len() * 10) as f64;
        assert!((frac - 0.4).abs() < 0.02, "{frac}");
    }

    #[test]
    fn synthetic_lexicon_shape() {
        let cfg = SyntheticConfig { vocabulary: 3, synonym_fanout: 2, ..small() };
        let lex = synthetic_lexicon(&cfg);
        assert_eq!(lex.len(), 9);
        assert_eq!(lex.alternatives("g1m0"), vec!["g1m1".to_string(), "g1m2".to_string()]);
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticConfig { k_min: 0, ..small() }.validate().is_err());
        assert!(SyntheticConfig { k_min: 9, ..small() }.validate().is_err());
        assert!(SyntheticConfig { truth_fraction: 0.0, ..small() }.validate().is_err());
        assert!(SyntheticConfig { sigma: -1.0, ..small() }.validate().is_err());
        assert!(SyntheticConfig { d: 5, ..small() }.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn perfect_scorer_trial_has_zero_loss() {
        let cfg = SyntheticConfig { sigma: 0.0, ..small() };
        for alpha in [0.1, 0.45, 0.8] {
            let r = run_trial(&cfg, alpha, CalibrationMode::Exact, false).unwrap();
            assert_eq!(r.mean_loss, 0.0);
            assert_eq!(r.lambda_hat, 0.0);
            assert!(r.feasible);
        }
    }

    #[test]
    fn infeasible_trial_uses_full_sets() {
        let cfg = SyntheticConfig {
            n_calibration: 1,
            n_test: 5,
            k_min: 6,
            k_max: 6,
            ..small()
        };
        let r = run_trial(&cfg, 0.05, CalibrationMode::Exact, false).unwrap();
        assert!(!r.feasible);
        assert_eq!((r.lambda_hat, r.mean_loss, r.mean_set_size), (1.0, 0.0, 6.0));
    }

    #[test]
    fn single_trial_has_undefined_se() {
        let report = run_coverage_experiment(&small(), 0.3, 1, CalibrationMode::Exact, false).unwrap();
        assert_eq!(report.se, None);
        assert_eq!(report.within_bound(), None);
        assert_eq!(report.per_trial_losses.len(), 1);
        let csv = summarize(&[report]).to_csv();
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row.split(',').nth(5), Some(""));
    }

    #[test]
    fn experiments_are_reproducible() {
        let a = run_coverage_experiment(&small(), 0.3, 8, CalibrationMode::Grid, true).unwrap();
        let b = run_coverage_experiment(&small(), 0.3, 8, CalibrationMode::Grid, true).unwrap();
        assert_eq!(a, b);
        let c = a.comparator.unwrap();
        assert_eq!(c.superset_violations, 0);
        assert_eq!(c.instances, 8 * 40);
    }

    #[test]
    fn grand_mean_is_mean_of_trial_means() {
        let r = run_coverage_experiment(&small(), 0.2, 12, CalibrationMode::Exact, false).unwrap();
        let m = r.per_trial_losses.iter().sum::<f64>() / 12.0;
        assert!((r.grand_mean_loss - m).abs() < 1e-12);
        assert!(r.per_trial_losses.iter().all(|l| (0.0..=1.0).contains(l)));
    }

    #[test]
    fn lambda_hat_grows_with_noise() {
        let mut previous = f64::NEG_INFINITY;
        for sigma in [0.1, 0.5, 2.0] {
            let cfg = SyntheticConfig { sigma, ..small() };
            let r = run_coverage_experiment(&cfg, 0.2, 30, CalibrationMode::Exact, false).unwrap();
            assert!(r.mean_lambda >= previous, "sigma {sigma}: {} < {previous}", r.mean_lambda);
            previous = r.mean_lambda;
        }
    }

    #[test]
    fn set_size_shrinks_with_alpha() {
        let mut previous = f64::INFINITY;
        for alpha in [0.1, 0.2, 0.45, 0.8] {
            let r = run_coverage_experiment(&small(), alpha, 30, CalibrationMode::Exact, false).unwrap();
            assert!(r.mean_set_size <= previous, "alpha {alpha}");
            previous = r.mean_set_size;
        }
    }

    #[test]
    fn perfect_scorer_set_size_equals_truth_size() {
        let cfg = SyntheticConfig { sigma: 0.0, ..small() };
        let r = run_coverage_experiment(&cfg, 0.3, 5, CalibrationMode::Exact, false).unwrap();
        let mut expected = Vec::new();
        for t in 0..5u64 {
            let trial = SyntheticConfig { seed: derive_seed(cfg.seed, t), ..cfg.clone() };
            let data = generate_synthetic_dataset(&trial).unwrap();
            let (_, test) = split_dataset(&data, 0.5, derive_seed(trial.seed, 1)).unwrap();
            let sizes: Vec<f64> = test.examples.iter().map(|e| e.explanation.len() as f64).collect();
            expected.push(mean(&sizes).unwrap());
        }
        assert!((r.mean_set_size - mean(&expected).unwrap()).abs() < 1e-12);
        let row = &summarize(&[r]).rows[0];
        assert_eq!(row[6].parse::<f64>().unwrap(), mean(&expected).unwrap());
    }

    #[test]
    fn summary_layout() {
        assert_eq!(summarize(&[]).to_csv(), format!("{}\n", SUMMARY_COLUMNS.join(",")));
        let r1 = run_coverage_experiment(&small(), 0.3, 3, CalibrationMode::Exact, false).unwrap();
        let r2 = run_coverage_experiment(&small(), 0.5, 3, CalibrationMode::Grid, false).unwrap();
        let table = summarize(&[r1, r2]);
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.iter().all(|r| r.len() == SUMMARY_COLUMNS.len()));
        assert_eq!(table.rows[1][1], "grid");
    }

    #[test]
    fn experiment_config_json() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"synthetic": {"n_calibration": 10, "n_test": 10, "k_min": 4, "k_max": 6}, "alphas": [0.2, 0.5], "trials": 2, "robust": [false, true]}"#,
        )
        .unwrap();
        assert_eq!(cfg.modes, vec![CalibrationMode::Exact]);
        assert_eq!(cfg.synthetic.sigma, 0.3);
        let reports = run_sweep(&cfg).unwrap();
        assert_eq!(reports.len(), 4);
        assert!(reports[2].robust);
    }
}
