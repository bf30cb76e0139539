use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmm-adapt")).args(args).env("GMM_ADAPT_OUT", out_root).output().unwrap()
}

#[test]
fn memory_prints_the_ratio_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["memory", "--classes-from", "12", "--classes-to", "12"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "12");
    assert_eq!(row[1], "25740");

    let out = bin(&["memory", "--fd-r", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn adapt_then_replay_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["adapt", "--n-batches", "3", "--source.epochs=2"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = tmp.path().join("adapt-seed7");
    assert!(run_dir.join("summary.json").is_file());
    assert!(String::from_utf8_lossy(&out.stderr).contains("thresholds not frozen"));

    let out = bin(&["replay", run_dir.to_str().unwrap()], tmp.path());
    assert!(out.status.success());

    std::fs::write(run_dir.join("summary.json"), "{}\n").unwrap();
    let out = bin(&["replay", run_dir.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_source_output_feeds_adapt() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    let run = tmp.path().join("run");
    let common = ["--source.epochs", "2", "--n-batches", "2"];
    let mut args = vec!["train-source", "--out", src.to_str().unwrap()];
    args.extend(common);
    assert!(bin(&args, tmp.path()).status.success());
    let mut args = vec!["adapt", "--source", src.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend(common);
    let out = bin(&args, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_and_flags_merge() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 3, "n_batches": 2, "source": {"epochs": 1}}"#).unwrap();
    let run = tmp.path().join("run");
    let out = bin(&["adapt", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--p-reject", "40"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["config"]["seed"], 3);
    assert_eq!(resolved["config"]["p_reject"], 40.0);
    assert_eq!(resolved["config"]["source"]["epochs"], 1);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["adapt", "--no-such-key", "1"],
        vec!["adapt", "--p-reject", "150"],
        vec!["adapt", "--shift.n_source_private", "0", "--shift.n_shared", "1"],
        vec!["sweep", "--param", "depth", "--values", "1"],
    ] {
        assert_eq!(bin(&args, tmp.path()).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn diverging_updates_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["adapt", "--source.epochs", "1", "--n-batches", "4", "--lr", "1e300"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch"));
}
