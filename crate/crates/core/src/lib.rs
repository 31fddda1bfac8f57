//! Distribution-free coverage guarantees for token-level explanation sets.
//!
//! A scorer assigns every question token an importance score in `[0, 1]`.
//! Calibrating a threshold `lambda` on held-out examples with annotated
//! explanation tokens yields sets `{j : score_j >= 1 - lambda}` that, on
//! exchangeable test data, miss on average at most an `alpha` fraction of the
//! ground-truth tokens. The [`robust`] module extends this to test questions
//! corrupted by up to `d` synonym substitutions.
//!
//! Modules:
//! - [`dataset`]: domain types, JSON Lines ingestion, validation, splitting
//! - [`scorer`]: built-in deterministic scorers and a cached remote client
//! - [`calibrate`]: loss, empirical risk and threshold calibration
//! - [`sets`]: set construction, prediction and evaluation
//! - [`robust`]: synonym lexicons, perturbation balls and robust sets
//! - [`sim`]: synthetic data and Monte Carlo coverage experiments

pub mod calibrate;
pub mod dataset;
pub mod io;
pub mod numeric;
pub mod robust;
pub mod scorer;
pub mod sets;
pub mod sim;

pub use calibrate::{
    adjusted_bound, calibrate_exact, calibrate_grid, critical_thresholds, empirical_risk, loss, risk_curve,
    uniform_grid, CalibrationMode, CalibrationResult, RiskCurve,
};
pub use dataset::{
    load_dataset, split_dataset, validate_example, CalibrationExample, Dataset, GroundTruthExplanation,
    ImportanceScores, TokenizedQuestion,
};
pub use robust::{
    ball_size, build_robust_set, enumerate_ball, inject_noise, robust_score, BallMode, BallSpec,
    RobustUncertaintySet, SynonymLexicon,
};
pub use scorer::{ScoreCacheKey, Scorer, ScorerSpec};
pub use sets::{build_set, evaluate, predict, UncertaintySet};
