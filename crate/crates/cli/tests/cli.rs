use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn packptq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_packptq"))
        .args(args)
        .env("PACKPTQ_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn config() -> String {
    fixture("resmlp-4x16.json").to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn score_twice_gives_identical_files() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for d in &dirs {
        let out = d.path().to_str().unwrap();
        let o = packptq(&["score", "--config", &config(), "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push(std::fs::read(d.path().join("scores.json")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let v: serde_json::Value = serde_json::from_slice(&files[0]).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4);
}

#[test]
fn missing_model_exits_2_naming_the_path() {
    let d = tempfile::tempdir().unwrap();
    let o = packptq(&[
        "score",
        "--config",
        &config(),
        "--out",
        d.path().to_str().unwrap(),
        "--override",
        "model=/nonexistent/model.json",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/model.json"), "{}", stderr(&o));
}

#[test]
fn infeasible_budget_exits_2_with_minimum() {
    let d = tempfile::tempdir().unwrap();
    let o = packptq(&[
        "pipeline",
        "--config",
        &config(),
        "--out",
        d.path().to_str().unwrap(),
        "--override",
        "budget=10",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("minimum achievable cost"), "{}", stderr(&o));
    assert!(d.path().join("stage-failed.json").exists());
}

#[test]
fn numerical_failure_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let o = packptq(&[
        "score",
        "--config",
        &config(),
        "--out",
        d.path().to_str().unwrap(),
        "--override",
        r#"perturbation.sigma={"kind":"absolute","value":1e300}"#,
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(packptq(&["score"]).status.code(), Some(2));
    assert_eq!(packptq(&["frobnicate"]).status.code(), Some(2));
    let bad = packptq(&["score", "--config", &config(), "--override", "no_equals_sign"]);
    assert_eq!(bad.status.code(), Some(2));
    let typo = packptq(&["score", "--config", &config(), "--override", "weight_bitz=3"]);
    assert_eq!(typo.status.code(), Some(2));
    let threads = Command::new(env!("CARGO_BIN_EXE_packptq"))
        .args(["score", "--config", &config()])
        .env("PACKPTQ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn pipeline_writes_report_and_bypass_is_exact() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().to_str().unwrap();
    let o = packptq(&[
        "pipeline", "--config", &config(), "--out", out, "--override", "weight_bits=32", "--override", "act_bits=32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["quantized_accuracy"], report["fp_accuracy"]);

    let o = packptq(&["eval", "--config", &config(), "--out", out, "--quantized", &format!("{out}/quantized-model.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("eval.json").exists());
}

#[test]
fn gen_data_writes_both_splits() {
    let d = tempfile::tempdir().unwrap();
    let o = packptq(&["gen-data", "--config", &config(), "--out", d.path().to_str().unwrap(), "--override", "dataset.n=100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("dataset.json")).unwrap()).unwrap();
    assert_eq!(v["test"]["labels"].as_array().unwrap().len(), 100);
}

#[test]
fn gen_model_reproduces_the_committed_fixture() {
    let d = tempfile::tempdir().unwrap();
    let o = packptq(&["gen-model", "--config", &config(), "--out", d.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(d.path().join("model.json")).unwrap(),
        std::fs::read(fixture("resmlp-4x16.model.json")).unwrap()
    );
}
