//! End-to-end smoke tests driving the compiled binary: exit codes, the
//! synth/ingest/profile loop, checkpoint round trips and report determinism.

use std::path::Path;
use std::process::{Command, Output};

fn relana(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relana"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning the binary")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

const QUICK_CONFIG: &str = r#"
data_dir = "data"
artifacts = "artifacts"

[model]
dim = 8
heads = 2
encoder_layers = 1
mp_layers = 1

[train]
batch_size = 32
lr = 0.03
max_epochs = 8
seed = 1

[train.sampler]
fanouts = [4]

[base]
id = "dnn0"
kind = "dnn"
dim = 8
width = 8
depth = 1
"#;

fn synth(dir: &Path, users: usize) {
    let out = relana(
        dir,
        &["synth-data", "--out", "data", "--users", &users.to_string(), "--seed", "4"],
    );
    assert_ok(&out, "synth-data");
    std::fs::write(dir.join("run.toml"), QUICK_CONFIG).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown_cmd = relana(dir.path(), &["frobnicate"]);
    assert_eq!(unknown_cmd.status.code(), Some(2));
    let unknown_flag = relana(dir.path(), &["ingest", "data", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2));
    let no_args = relana(dir.path(), &[]);
    assert_eq!(no_args.status.code(), Some(2));
}

#[test]
fn failures_exit_1_with_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = relana(dir.path(), &["ingest", "no-such-dir"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).expect("structured stderr");
    assert!(err["error"]["message"].is_string());
}

#[test]
fn synth_ingest_and_profiles_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 60);

    let ingest = relana(dir.path(), &["ingest", "data"]);
    assert_ok(&ingest, "ingest");
    let summary = stdout_json(&ingest);
    assert_eq!(summary["rows"]["users"], 60);
    assert_eq!(summary["catalog"]["relations"][0], "orders.user_id->users");

    let validate = relana(dir.path(), &["profile", "--config", "run.toml", "validate"]);
    assert_ok(&validate, "profile validate");
    let v = stdout_json(&validate);
    assert_eq!(v["task"]["target_table"], "users");
    assert_eq!(v["signature"].as_str().unwrap().len(), 16);

    let derive =
        relana(dir.path(), &["profile", "--config", "run.toml", "derive", "--emit-sql"]);
    assert_ok(&derive, "profile derive");
    let d = stdout_json(&derive);
    let sql = d["sql"].as_array().unwrap();
    assert!(sql.iter().any(|s| s.as_str().unwrap().contains("FROM \"orders\"")));
}

#[test]
fn train_eval_checkpoint_round_trip_and_deterministic_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 80);

    let train = relana(dir.path(), &["train", "--config", "run.toml"]);
    assert_ok(&train, "train");
    let best = stdout_json(&train)["metric"].as_f64().unwrap();

    // The saved checkpoint re-scores the validation split to the same value.
    let eval = relana(dir.path(), &["eval", "--config", "run.toml", "--split", "valid"]);
    assert_ok(&eval, "eval");
    let value = stdout_json(&eval)["value"].as_f64().unwrap();
    assert!(
        (value - best).abs() <= 1e-9,
        "eval {value} drifted from training best {best}"
    );

    let predict = relana(dir.path(), &["predict", "--config", "run.toml", "--split", "test"]);
    assert_ok(&predict, "predict");
    let preds: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("artifacts/predictions.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(preds["score_space"], "probability");
    assert!(!preds["predictions"].as_array().unwrap().is_empty());

    let explain = relana(dir.path(), &["explain", "--config", "run.toml", "--split", "test"]);
    assert_ok(&explain, "explain");
    let imps = stdout_json(&explain);
    // One relation: the slot universe is self plus four aggregators.
    assert_eq!(imps["importances"].as_array().unwrap().len(), 5);

    let report = relana(dir.path(), &["report", "--config", "run.toml"]);
    assert_ok(&report, "report");
    let json_path = dir.path().join("artifacts/synth_relational_classification.report.json");
    let md_path = dir.path().join("artifacts/synth_relational_classification.report.md");
    let first = std::fs::read(&json_path).unwrap();
    let md = std::fs::read_to_string(&md_path).unwrap();
    assert!(md.contains("<!-- narrative-source: template -->"));

    let again = relana(dir.path(), &["report", "--config", "run.toml"]);
    assert_ok(&again, "second report");
    let second = std::fs::read(&json_path).unwrap();
    assert_eq!(first, second, "report JSON must be byte-identical across runs");
}

#[test]
fn base_pool_dispatch_and_registry_recording() {
    let dir = tempfile::tempdir().unwrap();
    // The probe needs 64 labeled fit rows, so the train split must be big.
    synth(dir.path(), 120);

    let base = relana(dir.path(), &["train", "--config", "run.toml", "--base-only"]);
    assert_ok(&base, "train --base-only");

    let dispatch =
        relana(dir.path(), &["dispatch", "--config", "run.toml", "--epsilon", "0.1"]);
    assert_ok(&dispatch, "dispatch");
    let decision = stdout_json(&dispatch);
    assert_eq!(decision["selected"], "dnn0");
    assert!(decision["scores"]["dnn0"].is_f64());
    assert!(matches!(decision["action"].as_str(), Some("deploy_base" | "augment")));
    assert!(dir.path().join("artifacts/decision.json").exists());

    let eval = relana(
        dir.path(),
        &["eval", "--config", "run.toml", "--base", "dnn0", "--record", "dnn0"],
    );
    assert_ok(&eval, "eval --base --record");
    let registry: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("artifacts/registry.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(registry["entries"][0]["model_id"], "dnn0");
    assert_eq!(registry["entries"][0]["count"], 1);
}
