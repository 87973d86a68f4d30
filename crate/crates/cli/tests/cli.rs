use std::path::Path;
use std::process::{Command, Output};

fn hierball(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierball"))
        .args(args)
        .current_dir(dir)
        .env_remove("HIERBALL_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_CONFIG: &str = r#"{
  "tasks": 2,
  "synthetic": { "samples_per_instance": 12, "input_dim": 6 },
  "embed": { "dim": 4, "poincare_epochs": 20, "entailment_epochs": 5, "separation_epochs": 20 },
  "learner": { "hidden": [12] }
}"#;

#[test]
fn embed_hierarchy_writes_one_point_per_node() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("t.tsv"),
        "root\tother\t-\ns\tsuperclass\troot\nc\tclass\ts\ni\tinstance\tc\nj\tinstance\tc\n",
    )
    .unwrap();
    let o = hierball(
        dir.path(),
        &["embed-hierarchy", "--tree", "t.tsv", "--dim", "6", "--out", "p.tsv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("p.tsv")).unwrap();
    assert!(text.starts_with("6\t1\t5\n"));
    assert_eq!(text.lines().count(), 6);
    assert!(stdout(&o).contains("rank_correlation"));
    assert!(stdout(&o).contains("cone_satisfaction_after_entailment"));
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = hierball(dir.path(), &["run", "--no-such-flag"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
    let o = hierball(dir.path(), &["frobnicate"]);
    assert!(!o.status.success());
}

#[test]
fn user_errors_exit_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = hierball(dir.path(), &["run", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
    assert!(!stderr(&o).contains("panicked"));

    std::fs::write(dir.path().join("bad.tsv"), "a\tinstance\tb\n").unwrap();
    let o = hierball(dir.path(), &["embed-hierarchy", "--tree", "bad.tsv", "--out", "p.tsv"]);
    assert_eq!(o.status.code(), Some(1));
    let o = hierball(dir.path(), &["run", "--tasks", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.tsv", "b.tsv"] {
        let o = hierball(
            dir.path(),
            &["gen-data", "--out", out, "--samples-per-instance", "5", "--seed", "3"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.tsv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.tsv")).unwrap());
    assert!(String::from_utf8(a).unwrap().starts_with("60\t32\n"));
}

#[test]
fn run_evaluate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.json"), SMALL_CONFIG).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hierball"))
        .args(["run", "--config", "exp.json"])
        .current_dir(dir.path())
        .env("HIERBALL_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for key in [
        "instance_accuracy",
        "class_accuracy",
        "superclass_accuracy",
        "forgetting",
        "lca_severity",
    ] {
        assert!(stdout(&o).contains(key), "{key}");
    }
    let run = dir.path().join("from-env");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    let headline = metrics["headline"].as_object().unwrap();
    assert_eq!(headline.len(), 5);
    assert!(headline.values().all(|v| v.is_number()));
    assert_eq!(metrics["config"]["tasks"], 2);

    let o = hierball(dir.path(), &["evaluate", "--run-dir", "from-env"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let final_instance = &metrics["aggregates"]["instance"]["final_per_task"];
    assert_eq!(&eval["instance_accuracy"], final_instance);

    let o = hierball(
        dir.path(),
        &["report", "--metrics", "from-env/metrics.json", "--out-dir", "csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = std::fs::read_to_string(dir.path().join("csv/grid.csv")).unwrap();
    assert!(grid.starts_with("metric,i,j,value\n"));
    assert_eq!(grid.lines().count(), 1 + 4 * 2 * 2);
    let summary = std::fs::read_to_string(dir.path().join("csv/summary.csv")).unwrap();
    assert!(summary.contains("instance,average_forgetting,,"));
}

#[test]
fn flag_beats_environment_for_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.json"), SMALL_CONFIG).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hierball"))
        .args([
            "run",
            "--config",
            "exp.json",
            "--out-dir",
            "from-flag",
            "--method",
            "naive",
        ])
        .current_dir(dir.path())
        .env("HIERBALL_OUT_DIR", "from-env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("from-flag/metrics.json").exists());
    assert!(!dir.path().join("from-env").exists());
    assert!(stdout(&o).contains("method\tnaive"));
}
