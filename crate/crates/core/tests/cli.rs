use std::fs;
use std::process::{Command, Output};

fn setpool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setpool"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_and_unknown_flags() {
    assert_eq!(setpool(&["--help"]).status.code(), Some(0));
    assert_eq!(setpool(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(setpool(&[]).status.code(), Some(2));
    assert_eq!(setpool(&["train", "--pooling", "median"]).status.code(), Some(2));
}

#[test]
fn missing_data_file_names_path() {
    let o = setpool(&["train", "--data", "/no/such/posture.csv", "--leave-out-user", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/posture.csv"));
}

#[test]
fn gradcheck_prints_every_layer() {
    let o = setpool(&["gradcheck", "--all", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("seed: 3"));
    for name in ["dense", "maxout", "embed_set", "pool_max", "equivariant", "pairwise", "residual_projection", "softmax_xent", "model_pcdan_sum"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
    assert_eq!(setpool(&["gradcheck", "--only", "nothing"]).status.code(), Some(2));
}

#[test]
fn ambiguity_demo_reports_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let o = setpool(&["ambiguity-demo", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("example A:") && text.contains("example B:"));
    assert!(text.contains("0.2846025444870217"));
    let csv = fs::read_to_string(dir.path().join("ambiguity.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("linear_max_gap,0e0,")));
    assert!(dir.path().join("example_pair.csv").exists());
}

#[test]
fn train_on_posture_csv() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.csv");
    let o = setpool(&["gen-synthetic", "--users", "3", "--sets-per-class", "20", "--seed", "2", "--out", corpus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"model": {"embedding_size": 7}, "train": {"max_epochs": 4}}"#).unwrap();
    let out = dir.path().join("run");
    let o = setpool(&[
        "train", "--config", cfg.to_str().unwrap(), "--data", corpus.to_str().unwrap(),
        "--leave-out-user", "2", "--per-class", "10", "--seed", "7", "--out-dir", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("\"embedding_size\":7") && text.contains("seed: 7"));
    let run = fs::read_to_string(out.join("run.csv")).unwrap();
    assert!(run.starts_with("config,seed,epochs,best_epoch,best_val_loss,test_accuracy\ncdan/nonlinear/7/sum,7,4,"));
    assert_eq!(fs::read_to_string(out.join("epochs.csv")).unwrap().lines().count(), 5);

    // too few instances per class for the requested split
    let o = setpool(&["train", "--data", corpus.to_str().unwrap(), "--leave-out-user", "2", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_model_config_is_usage_error() {
    let o = setpool(&["train", "--family", "pdan", "--embedding", "linear", "--max-epochs", "1", "--sets-per-class", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn louo_summary_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_setpool"))
        .args(["evaluate-louo", "--users", "3", "--repetitions", "2", "--per-class", "8", "--max-epochs", "2"])
        .args(["--leave-out-user", "1", "--leave-out-user", "3", "--out-dir"])
        .arg(dir.path())
        .env("SETPOOL_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"], 4);
    assert_eq!(summary["config"], "cdan/nonlinear/11/sum");
    assert_eq!(summary["per_user"].as_array().unwrap().len(), 2);
}
