use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_explain-crc"))
        .current_dir(dir)
        .args(args)
        .env_remove("SCORER_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn generate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["generate", "--seed", "3", "--calibration-out", "cal.jsonl", "--test-out", "test.jsonl", "--lexicon-out", "lex.jsonl"];
    args.extend_from_slice(extra);
    let out = run(dir, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn alpha_out_of_range_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let out = run(dir.path(), &["calibrate", "--data", "cal.jsonl", "--alpha", "1.5"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let out = run(dir.path(), &["predict", "--calibration", "absent.json", "--data", "test.jsonl"]);
    assert_eq!(code(&out), 2);
    let out = run(dir.path(), &["calibrate", "--data", "absent.jsonl", "--alpha", "0.2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn single_example_calibration_falls_back() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let first = fs::read_to_string(dir.path().join("cal.jsonl")).unwrap();
    fs::write(dir.path().join("one.jsonl"), first.lines().next().unwrap()).unwrap();
    let out = run(dir.path(), &["calibrate", "--data", "one.jsonl", "--alpha", "0.05", "--out", "r.json"]);
    assert_eq!(code(&out), 0);
    let r = read_json(&dir.path().join("r.json"));
    assert_eq!(r["feasible"], Value::Bool(false));
    assert_eq!(r["lambda_hat"].as_f64(), Some(1.0));
}

#[test]
fn malformed_dataset_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.jsonl"),
        r#"{"id":"a","tokens":["x","y"],"scores":[0.5,1.5],"explanation_indices":[0]}"#,
    )
    .unwrap();
    let out = run(dir.path(), &["calibrate", "--data", "bad.jsonl", "--alpha", "0.2"]);
    assert_eq!(code(&out), 2);
    let out = run(dir.path(), &["calibrate", "--data", "bad.jsonl", "--alpha", "0.2", "--clamp-scores"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn grid_mode_records_grid_size_and_passes_stats() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let out = run(
        dir.path(),
        &["calibrate", "--data", "cal.jsonl", "--alpha", "0.3", "--mode", "grid", "--grid-size", "201", "--out", "r.json"],
    );
    assert_eq!(code(&out), 0);
    let r = read_json(&dir.path().join("r.json"));
    assert_eq!(r["mode"], "grid");
    assert_eq!(r["grid_size"].as_u64(), Some(201));
    let out = run(dir.path(), &["stats", "--calibration", "r.json", "--data", "cal.jsonl", "--out", "s.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&dir.path().join("s.json"));
    assert_eq!(s["bound_holds"], Value::Bool(true));
    assert_eq!(s["minimal"], Value::Bool(true));
}

#[test]
fn stats_flags_inconsistent_n() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    run(dir.path(), &["calibrate", "--data", "cal.jsonl", "--alpha", "0.3", "--out", "r.json"]);
    let out = run(dir.path(), &["stats", "--calibration", "r.json", "--data", "test.jsonl"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn robust_predict_with_zero_radius_matches_predict() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    run(dir.path(), &["calibrate", "--data", "cal.jsonl", "--alpha", "0.2", "--out", "r.json"]);
    let out = run(dir.path(), &["predict", "--calibration", "r.json", "--data", "test.jsonl", "--out", "p.jsonl"]);
    assert_eq!(code(&out), 0);
    let out = run(
        dir.path(),
        &["robust-predict", "--calibration", "r.json", "--data", "test.jsonl", "--lexicon", "lex.jsonl", "--d", "0", "--out", "rp.jsonl"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let plain = fs::read_to_string(dir.path().join("p.jsonl")).unwrap();
    let robust = fs::read_to_string(dir.path().join("rp.jsonl")).unwrap();
    assert_eq!(plain.lines().count(), robust.lines().count());
    for (p, r) in plain.lines().zip(robust.lines()) {
        let p: Value = serde_json::from_str(p).unwrap();
        let r: Value = serde_json::from_str(r).unwrap();
        assert_eq!(p["id"], r["id"]);
        let items = r["items"].as_array().unwrap();
        let positions: Vec<&Value> = items.iter().map(|it| &it["position"]).collect();
        let tokens: Vec<&Value> = items.iter().map(|it| &it["candidate"]).collect();
        assert_eq!(positions, p["indices"].as_array().unwrap().iter().collect::<Vec<_>>());
        assert_eq!(tokens, p["tokens"].as_array().unwrap().iter().collect::<Vec<_>>());
    }
}

#[test]
fn robust_predict_needs_a_scorer_beyond_recorded_scores() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    run(dir.path(), &["calibrate", "--data", "cal.jsonl", "--alpha", "0.2", "--out", "r.json"]);
    let base = ["robust-predict", "--calibration", "r.json", "--data", "test.jsonl", "--lexicon", "lex.jsonl", "--d", "1"];
    assert_eq!(code(&run(dir.path(), &base)), 2);

    let mut with_scorer = base.to_vec();
    with_scorer.extend(["--scorer", "oracle_noise:sigma=0.3", "--inject-noise", "--out", "rp.jsonl"]);
    let out = run(dir.path(), &with_scorer);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut strict = with_scorer.clone();
    strict.push("--strict");
    assert_eq!(code(&run(dir.path(), &strict)), 2);
}

#[test]
fn exact_ball_over_budget_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    run(dir.path(), &["calibrate", "--data", "cal.jsonl", "--alpha", "0.2", "--scorer", "oracle_noise:sigma=0.3", "--out", "r.json"]);
    let args = [
        "robust-predict", "--calibration", "r.json", "--data", "test.jsonl", "--lexicon", "lex.jsonl", "--d", "2", "--budget", "10",
        "--scorer", "oracle_noise:sigma=0.3",
    ];
    let out = run(dir.path(), &args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));

    let mut cw = args.to_vec();
    cw.extend(["--ball-mode", "coordinatewise", "--out", "rp.jsonl"]);
    assert_eq!(code(&run(dir.path(), &cw)), 0);
    assert_eq!(code(&run(dir.path(), &[&cw[..], &["--scorer", "uniform_random"]].concat())), 2);
}

#[test]
fn simulate_writes_summary_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["simulate", "--alpha", "0.2,0.45", "--trials", "10", "--mode", "exact,grid", "--seed", "5", "--out", "s.csv", "--report", "r.json"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,mode,robust,trials,mean_loss,se,mean_set_size,mean_lambda,feasibility_rate");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0.2,exact,false,10,"));
    assert!(lines[4].starts_with("0.45,grid,false,10,"));
    assert_eq!(read_json(&dir.path().join("r.json")).as_array().unwrap().len(), 4);
}

#[test]
fn simulate_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("exp.json"),
        r#"{"synthetic": {"n_calibration": 30, "n_test": 30, "seed": 9}, "alphas": [0.3], "trials": 5, "robust": [true]}"#,
    )
    .unwrap();
    let out = run(dir.path(), &["simulate", "--config", "exp.json", "--out", "s.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("0.3,exact,true,5,"));

    fs::write(dir.path().join("bad.json"), r#"{"alphas": [0.3], "trials": 5, "typo": 1}"#).unwrap();
    assert_eq!(code(&run(dir.path(), &["simulate", "--config", "bad.json"])), 2);
}

#[test]
fn rescoring_records_scorer_identity() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let out = run(
        dir.path(),
        &["calibrate", "--data", "cal.jsonl", "--alpha", "0.2", "--scorer", "uniform_random:seed=4", "--out", "r.json"],
    );
    assert_eq!(code(&out), 0);
    assert_eq!(read_json(&dir.path().join("r.json"))["scorer"], "uniform_random(seed=4)");
    let out = run(dir.path(), &["predict", "--calibration", "r.json", "--data", "test.jsonl", "--strict"]);
    assert_eq!(code(&out), 2);
    let out = run(
        dir.path(),
        &["predict", "--calibration", "r.json", "--data", "test.jsonl", "--scorer", "uniform_random:seed=4", "--strict"],
    );
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 100);
}

#[test]
fn bad_scorer_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    for spec in ["bogus", "constant:value=2", "remote:endpoint=ftp://x", "oracle_noise"] {
        let out = run(dir.path(), &["calibrate", "--data", "cal.jsonl", "--alpha", "0.2", "--scorer", spec]);
        assert_eq!(code(&out), 2, "spec {spec}");
    }
}

#[test]
fn unreachable_remote_scorer_is_internal_fault() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &["--n-calibration", "2", "--n-test", "2"]);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let spec = format!("remote:endpoint=http://127.0.0.1:{port}/score,max_retries=0,timeout_ms=500");
    let out = run(dir.path(), &["calibrate", "--data", "cal.jsonl", "--alpha", "0.2", "--scorer", &spec]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}
