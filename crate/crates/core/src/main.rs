use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use explain_crc::calibrate::{
    adjusted_bound, calibrate_exact, calibrate_grid, empirical_risk, risk_curve, uniform_grid, CalibrateError,
    CalibrationMode, CalibrationResult, DEFAULT_GRID_SIZE,
};
use explain_crc::dataset::{load_dataset_with, split_dataset, write_dataset, CalibrationExample, Dataset, DatasetError, LoadOptions};
use explain_crc::io::write_atomic;
use explain_crc::numeric::mean;
use explain_crc::robust::{
    build_robust_set, inject_noise, robust_loss, BallMode, BallSpec, RobustError, RobustPredictionRecord, SynonymLexicon,
    DEFAULT_ENUMERATION_BUDGET,
};
use explain_crc::scorer::{truth_table, PrecomputedScorer, ScoreError, Scorer, ScorerSpec, PRECOMPUTED_IDENTITY};
use explain_crc::sets::{build_set, check_scorer_identity, evaluate, PredictionRecord, SetError};
use explain_crc::sim::{
    derive_seed, generate_synthetic_dataset, run_sweep, summarize, synthetic_lexicon, ExperimentConfig, SimError,
    SyntheticConfig,
};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Internal(_) => 1,
            Self::Input(_) => 2,
            Self::Verification(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Write(_) => Self::Internal(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<CalibrateError> for CliError {
    fn from(e: CalibrateError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::Transport { .. } => Self::Internal(format!("scorer failed: {e}")),
            _ => Self::Input(format!("scorer: {e}")),
        }
    }
}

impl From<SetError> for CliError {
    fn from(e: SetError) -> Self {
        match e {
            SetError::Score(inner) => inner.into(),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<RobustError> for CliError {
    fn from(e: RobustError) -> Self {
        match e {
            RobustError::Score(inner) => inner.into(),
            RobustError::Set(inner) => inner.into(),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => Self::Input(format!("invalid synthetic config: {m}")),
            SimError::Dataset(e) => e.into(),
            SimError::Calibrate(e) => e.into(),
            SimError::Set(e) => e.into(),
            SimError::Robust(e) => e.into(),
        }
    }
}

/// Calibrated token-level explanation sets.
#[derive(Debug, Parser)]
#[command(name = "explain-crc", version, about)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Master seed for every stochastic step
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory for cached remote scores (overrides SCORER_CACHE_DIR)
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Treat a scorer identity mismatch as an error
    #[arg(long, global = true)]
    strict: bool,
    /// Clamp out-of-range dataset scores into [0, 1] instead of rejecting them
    #[arg(long, global = true)]
    clamp_scores: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate a threshold on a labeled dataset
    Calibrate(CalibrateArgs),
    /// Build explanation sets for test questions
    Predict(PredictArgs),
    /// Build synonym-robust explanation sets
    RobustPredict(RobustPredictArgs),
    /// Run Monte Carlo coverage experiments on synthetic data
    Simulate(SimulateArgs),
    /// Re-verify a calibration result against its dataset
    Stats(StatsArgs),
    /// Write a synthetic calibration/test split and its lexicon
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Grid,
}

impl From<ModeArg> for CalibrationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => Self::Exact,
            ModeArg::Grid => Self::Grid,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BallModeArg {
    Exact,
    Coordinatewise,
}

impl From<BallModeArg> for BallMode {
    fn from(m: BallModeArg) -> Self {
        match m {
            BallModeArg::Exact => Self::Exact,
            BallModeArg::Coordinatewise => Self::Coordinatewise,
        }
    }
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let alpha: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(format!("alpha must lie in (0, 1), got {alpha}"))
    }
}

fn parse_grid_size(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        _ => Err(format!("grid size must be an integer >= 2, got '{s}'")),
    }
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Calibration dataset (JSON Lines)
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_alpha)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    mode: ModeArg,
    /// Points in the uniform grid (grid mode and risk curve)
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE, value_parser = parse_grid_size)]
    grid_size: usize,
    /// Scorer spec, or "dataset" for the recorded scores
    #[arg(long, default_value = PRECOMPUTED_IDENTITY)]
    scorer: String,
    /// Calibration result JSON (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Risk curve CSV over the uniform grid
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Calibration result JSON
    #[arg(long)]
    calibration: PathBuf,
    /// Test dataset (JSON Lines)
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = PRECOMPUTED_IDENTITY)]
    scorer: String,
    /// Predictions (JSON Lines; stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RobustPredictArgs {
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Synonym lexicon (JSON Lines)
    #[arg(long)]
    lexicon: PathBuf,
    /// Maximum number of substituted tokens
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// Largest perturbation ball enumerated in exact mode
    #[arg(long, default_value_t = DEFAULT_ENUMERATION_BUDGET)]
    budget: u128,
    #[arg(long, value_enum, default_value_t = BallModeArg::Exact)]
    ball_mode: BallModeArg,
    #[arg(long, default_value = PRECOMPUTED_IDENTITY)]
    scorer: String,
    /// Perturb each question with up to d substitutions before prediction
    #[arg(long)]
    inject_noise: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SyntheticArgs {
    #[arg(long, default_value_t = 100)]
    n_calibration: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long, default_value_t = 8)]
    k_min: usize,
    #[arg(long, default_value_t = 16)]
    k_max: usize,
    #[arg(long, default_value_t = 0.4)]
    truth_fraction: f64,
    /// Oracle noise level
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    /// Alternatives per token in the synthetic lexicon
    #[arg(long, default_value_t = 2)]
    fanout: usize,
    #[arg(long, default_value_t = 1)]
    d: usize,
    #[arg(long, default_value_t = 500)]
    vocabulary: usize,
    #[arg(long, default_value_t = DEFAULT_GRID_SIZE)]
    grid_size: usize,
}

impl SyntheticArgs {
    fn to_config(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_calibration: self.n_calibration,
            n_test: self.n_test,
            k_min: self.k_min,
            k_max: self.k_max,
            truth_fraction: self.truth_fraction,
            sigma: self.sigma,
            seed,
            synonym_fanout: self.fanout,
            d: self.d,
            vocabulary: self.vocabulary,
            grid_size: self.grid_size,
        }
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Experiment JSON; replaces every flag below
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated target risks
    #[arg(long, value_delimiter = ',', value_parser = parse_alpha, required_unless_present = "config")]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "exact")]
    mode: Vec<ModeArg>,
    /// Evaluate robust sets on noisy test questions
    #[arg(long)]
    robust: bool,
    #[command(flatten)]
    synthetic: SyntheticArgs,
    /// Summary CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full per-experiment reports as JSON
    #[arg(long)]
    report: Option<PathBuf>,
    /// Exit with status 3 if any grand mean exceeds alpha + 3 SE
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    calibration: PathBuf,
    /// The dataset the result was calibrated on
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = PRECOMPUTED_IDENTITY)]
    scorer: String,
    /// Stats JSON (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    synthetic: SyntheticArgs,
    #[arg(long)]
    calibration_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
    #[arg(long)]
    lexicon_out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes())
            .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display()))),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(format!("cannot write to stdout: {e}"))),
    }
}

fn to_json_pretty(value: &impl Serialize) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String, CliError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| CliError::Internal(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_calibration(path: &Path) -> Result<CalibrationResult, CliError> {
    let result: CalibrationResult = read_json(path)?;
    if !(0.0..=1.0).contains(&result.lambda_hat) {
        return Err(CliError::Input(format!(
            "{}: lambda_hat must lie in [0, 1], got {}",
            path.display(),
            result.lambda_hat
        )));
    }
    Ok(result)
}

fn load(path: &Path, global: &GlobalArgs) -> Result<Dataset, CliError> {
    Ok(load_dataset_with(
        path,
        LoadOptions {
            clamp_scores: global.clamp_scores,
        },
    )?)
}

fn resolve_scorer(spec: &str, data: &Dataset, global: &GlobalArgs) -> Result<Box<dyn Scorer>, CliError> {
    if spec == PRECOMPUTED_IDENTITY {
        return Ok(Box::new(PrecomputedScorer::from_dataset(data)));
    }
    let mut spec = ScorerSpec::parse_with_seed(spec, global.seed)?;
    if let ScorerSpec::Remote(cfg) = &mut spec {
        if cfg.cache_dir.is_none() {
            cfg.cache_dir = global.cache_dir.clone();
        }
    }
    Ok(spec.build(&truth_table(data))?)
}

/// The dataset with its scores replaced by `scorer`'s.
fn rescored(data: &Dataset, scorer: &dyn Scorer) -> Result<Vec<CalibrationExample>, CliError> {
    data.examples
        .par_iter()
        .map(|ex| {
            Ok(CalibrationExample {
                scores: scorer.score(&ex.question)?,
                ..ex.clone()
            })
        })
        .collect()
}

fn cmd_calibrate(args: &CalibrateArgs, global: &GlobalArgs) -> Result<(), CliError> {
    let data = load(&args.data, global)?;
    let scorer = resolve_scorer(&args.scorer, &data, global)?;
    let examples = rescored(&data, scorer.as_ref())?;
    let result = match CalibrationMode::from(args.mode) {
        CalibrationMode::Exact => calibrate_exact(&examples, args.alpha)?,
        CalibrationMode::Grid => calibrate_grid(&examples, args.alpha, &uniform_grid(args.grid_size))?,
    }
    .with_scorer(scorer.identity());
    if !result.feasible {
        log::warn!(
            "no threshold meets the adjusted bound {} with n={}; falling back to lambda=1",
            result.adjusted_bound,
            result.n
        );
    }
    emit(args.out.as_deref(), &to_json_pretty(&result)?)?;
    if let Some(path) = &args.curve {
        let curve = risk_curve(&examples, &uniform_grid(args.grid_size))?;
        emit(Some(path), &curve.to_csv())?;
    }
    eprintln!(
        "lambda_hat={} feasible={} risk={} bound={} n={}",
        result.lambda_hat, result.feasible, result.empirical_risk, result.adjusted_bound, result.n
    );
    Ok(())
}

fn cmd_predict(args: &PredictArgs, global: &GlobalArgs) -> Result<(), CliError> {
    let calibration = read_calibration(&args.calibration)?;
    let data = load(&args.data, global)?;
    let scorer = resolve_scorer(&args.scorer, &data, global)?;
    check_scorer_identity(scorer.as_ref(), &calibration, global.strict)?;
    let identity = scorer.identity();

    let outcomes: Vec<(PredictionRecord, f64, usize)> = data
        .examples
        .par_iter()
        .map(|ex| -> Result<_, CliError> {
            let scores = scorer.score(&ex.question)?;
            let mut set = build_set(&ex.question, &scores, calibration.lambda_hat)?;
            set.scorer = Some(identity.clone());
            let report = evaluate(&set, &ex.question.id, &ex.explanation)?;
            Ok((PredictionRecord::from(&set), report.loss, report.set_size))
        })
        .collect::<Result<_, _>>()?;

    let records: Vec<&PredictionRecord> = outcomes.iter().map(|(r, _, _)| r).collect();
    emit(args.out.as_deref(), &to_jsonl(&records)?)?;
    let losses: Vec<f64> = outcomes.iter().map(|(_, l, _)| *l).collect();
    let sizes: Vec<f64> = outcomes.iter().map(|(_, _, s)| *s as f64).collect();
    eprintln!(
        "predicted {} questions at lambda={}: mean_loss={} mean_set_size={}",
        records.len(),
        calibration.lambda_hat,
        mean(&losses).unwrap_or(0.0),
        mean(&sizes).unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_robust_predict(args: &RobustPredictArgs, global: &GlobalArgs) -> Result<(), CliError> {
    let calibration = read_calibration(&args.calibration)?;
    let data = load(&args.data, global)?;
    let lexicon = SynonymLexicon::load(&args.lexicon)?;
    let scorer = resolve_scorer(&args.scorer, &data, global)?;
    check_scorer_identity(scorer.as_ref(), &calibration, global.strict)?;
    let spec = BallSpec {
        d: args.d,
        enumeration_budget: args.budget,
        mode: args.ball_mode.into(),
    };

    let outcomes: Vec<(RobustPredictionRecord, f64, usize)> = data
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| -> Result<_, CliError> {
            let observed = if args.inject_noise {
                inject_noise(&ex.question, &lexicon, args.d, derive_seed(global.seed, i as u64))
            } else {
                ex.question.clone()
            };
            let set = build_robust_set(&observed, &lexicon, &spec, scorer.as_ref(), &calibration)?;
            let loss = robust_loss(&set, &ex.question, &ex.explanation)?;
            Ok((RobustPredictionRecord::from(&set), loss, set.len()))
        })
        .collect::<Result<_, _>>()?;

    let records: Vec<&RobustPredictionRecord> = outcomes.iter().map(|(r, _, _)| r).collect();
    emit(args.out.as_deref(), &to_jsonl(&records)?)?;
    let losses: Vec<f64> = outcomes.iter().map(|(_, l, _)| *l).collect();
    let sizes: Vec<f64> = outcomes.iter().map(|(_, _, s)| *s as f64).collect();
    let stats = scorer.stats();
    eprintln!(
        "robust sets for {} questions at lambda={} d={}: mean_loss={} mean_items={} scorer_calls={} cache_hits={}",
        records.len(),
        calibration.lambda_hat,
        args.d,
        mean(&losses).unwrap_or(0.0),
        mean(&sizes).unwrap_or(0.0),
        stats.upstream_calls,
        stats.cache_hits
    );
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, global: &GlobalArgs) -> Result<(), CliError> {
    let experiment = match &args.config {
        Some(path) => read_json::<ExperimentConfig>(path)?,
        None => ExperimentConfig {
            synthetic: args.synthetic.to_config(global.seed),
            alphas: args.alpha.clone(),
            trials: args.trials,
            modes: args.mode.iter().map(|&m| m.into()).collect(),
            robust: vec![args.robust],
        },
    };
    if let Some(bad) = experiment.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(CalibrateError::BadAlpha(*bad).into());
    }
    let reports = run_sweep(&experiment)?;
    emit(args.out.as_deref(), &summarize(&reports).to_csv())?;
    if let Some(path) = &args.report {
        emit(Some(path), &to_json_pretty(&reports)?)?;
    }

    let mut failed = Vec::new();
    for r in &reports {
        let verdict = match r.within_bound() {
            Some(true) => "ok",
            Some(false) => "EXCEEDS alpha + 3 SE",
            None => "se undefined",
        };
        eprintln!(
            "alpha={} mode={} robust={} mean_loss={} se={} {verdict}",
            r.alpha,
            r.mode,
            r.robust,
            r.grand_mean_loss,
            r.se.map(|s| s.to_string()).unwrap_or_default()
        );
        if r.within_bound() == Some(false) {
            failed.push(format!("alpha={} mode={} robust={}", r.alpha, r.mode, r.robust));
        }
    }
    if args.check && !failed.is_empty() {
        return Err(CliError::Verification(format!(
            "coverage check failed for {}",
            failed.join("; ")
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SetSizeSummary {
    min: usize,
    max: usize,
    mean: f64,
    median: f64,
    histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Serialize)]
struct StatsReport {
    n: usize,
    alpha: f64,
    lambda_hat: f64,
    feasible: bool,
    adjusted_bound: f64,
    recomputed_risk: f64,
    bound_holds: bool,
    /// Exact calibration on the same data, for the minimality check.
    exact_lambda_hat: f64,
    minimal: bool,
    set_size: SetSizeSummary,
    violations: Vec<String>,
}

const CONSISTENCY_TOLERANCE: f64 = 1e-12;

fn set_size_summary(sizes: &mut [usize]) -> SetSizeSummary {
    sizes.sort_unstable();
    let n = sizes.len();
    let median = if n % 2 == 1 {
        sizes[n / 2] as f64
    } else {
        (sizes[n / 2 - 1] + sizes[n / 2]) as f64 / 2.0
    };
    let mut histogram = BTreeMap::new();
    for &s in sizes.iter() {
        *histogram.entry(s).or_insert(0) += 1;
    }
    let as_f64: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    SetSizeSummary {
        min: sizes[0],
        max: sizes[n - 1],
        mean: mean(&as_f64).unwrap_or(0.0),
        median,
        histogram,
    }
}

fn cmd_stats(args: &StatsArgs, global: &GlobalArgs) -> Result<(), CliError> {
    let result = read_calibration(&args.calibration)?;
    if !(result.alpha > 0.0 && result.alpha < 1.0) {
        return Err(CalibrateError::BadAlpha(result.alpha).into());
    }
    let data = load(&args.data, global)?;
    let scorer = resolve_scorer(&args.scorer, &data, global)?;
    check_scorer_identity(scorer.as_ref(), &result, global.strict)?;
    let examples = rescored(&data, scorer.as_ref())?;

    let n = examples.len();
    let bound = adjusted_bound(result.alpha, n);
    let risk = empirical_risk(&examples, result.lambda_hat)?;
    let exact = calibrate_exact(&examples, result.alpha)?;

    let mut violations = Vec::new();
    if result.n != n {
        violations.push(format!("recorded n={} but the dataset has {n} examples", result.n));
    }
    if (result.adjusted_bound - bound).abs() > CONSISTENCY_TOLERANCE {
        violations.push(format!(
            "recorded adjusted bound {} differs from recomputed {bound}",
            result.adjusted_bound
        ));
    }
    if (result.empirical_risk - risk).abs() > CONSISTENCY_TOLERANCE {
        violations.push(format!(
            "recorded empirical risk {} differs from recomputed {risk}",
            result.empirical_risk
        ));
    }
    let bound_holds = risk <= bound;
    if result.feasible && !bound_holds {
        violations.push(format!(
            "bound violated: risk {risk} at lambda_hat={} exceeds {bound}",
            result.lambda_hat
        ));
    }
    if !result.feasible && result.lambda_hat != 1.0 {
        violations.push(format!("infeasible result must have lambda_hat=1, got {}", result.lambda_hat));
    }
    if !result.feasible && exact.feasible {
        violations.push(format!("marked infeasible, but lambda={} meets the bound", exact.lambda_hat));
    }

    let minimal = match (result.mode, result.grid_size) {
        (CalibrationMode::Grid, Some(size)) if size >= 2 => result.lambda_hat - exact.lambda_hat < 1.0 / (size - 1) as f64,
        _ => result.lambda_hat <= exact.lambda_hat,
    };
    if !minimal && result.feasible {
        log::warn!(
            "lambda_hat={} is not the smallest feasible threshold (exact: {})",
            result.lambda_hat,
            exact.lambda_hat
        );
    }

    let mut sizes: Vec<usize> = examples
        .iter()
        .map(|ex| build_set(&ex.question, &ex.scores, result.lambda_hat).map(|s| s.len()))
        .collect::<Result<_, _>>()?;
    let report = StatsReport {
        n,
        alpha: result.alpha,
        lambda_hat: result.lambda_hat,
        feasible: result.feasible,
        adjusted_bound: bound,
        recomputed_risk: risk,
        bound_holds,
        exact_lambda_hat: exact.lambda_hat,
        minimal,
        set_size: set_size_summary(&mut sizes),
        violations: violations.clone(),
    };
    emit(args.out.as_deref(), &to_json_pretty(&report)?)?;
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(violations.join("; ")))
    }
}

fn cmd_generate(args: &GenerateArgs, global: &GlobalArgs) -> Result<(), CliError> {
    let config = args.synthetic.to_config(global.seed);
    let data = generate_synthetic_dataset(&config)?;
    let fraction = config.n_calibration as f64 / data.len() as f64;
    let (cal, test) = split_dataset(&data, fraction, derive_seed(config.seed, 1))?;
    write_dataset(&cal, &args.calibration_out)?;
    write_dataset(&test, &args.test_out)?;
    if let Some(path) = &args.lexicon_out {
        emit(Some(path), &synthetic_lexicon(&config).to_jsonl())?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(workers) = cli.global.workers {
        if workers == 0 {
            return Err(CliError::Input("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::Internal(format!("cannot start worker pool: {e}")))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a, g),
        Command::Predict(a) => cmd_predict(a, g),
        Command::RobustPredict(a) => cmd_robust_predict(a, g),
        Command::Simulate(a) => cmd_simulate(a, g),
        Command::Stats(a) => cmd_stats(a, g),
        Command::Generate(a) => cmd_generate(a, g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
