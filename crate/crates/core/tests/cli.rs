use std::path::Path;
use std::process::{Command, Output};

fn fedchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedchain")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "n_nodes = [6]\nn_pools = [2]\nruns = 1\nchallenge_k = 200\n[synthetic]\nn_samples = 1200\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn single_round_then_validate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = fedchain(&["--config", &cfg, "single-round", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace.csv", "pools.csv", "transcript.csv", "fed_metrics.csv", "chain_metrics.csv", "ledger.jsonl", "model.bin"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ledger = out.join("ledger.jsonl");
    let o = fedchain(&["validate-chain", ledger.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("violations=0"));

    // flip one character of a transaction payload
    let text = std::fs::read_to_string(&ledger).unwrap();
    let tampered = text.replacen("\"reward\":1000", "\"reward\":1001", 1);
    assert_ne!(text, tampered);
    std::fs::write(&ledger, tampered).unwrap();
    let o = fedchain(&["validate-chain", ledger.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = fedchain(&["--config", &cfg, "show-config"]);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(text.contains("n_nodes = [6]"));
    assert!(text.contains("seed = 1\n"));

    let out = dir.path().join("grid");
    let o = fedchain(&[
        "--config", &cfg, "latency-grid", "--modes", "pow,fedchain", "--pools", "1,2", "--seed", "9", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("latency_grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("pow,6,1,1,"));
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("seeds: [9]"));
}

#[test]
fn skipped_pairs_warn_but_still_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("grid");
    let o = fedchain(&["--config", &cfg, "latency-grid", "--modes", "pow", "--pools", "2,9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipping n_nodes=6, n_pools=9"));
}

#[test]
fn accuracy_sweep_writes_its_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    let o = fedchain(&[
        "--config", &cfg, "accuracy-sweep", "--alphas", "0.1", "--schemes", "kl,fedavg", "--budget", "20", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("accuracy_sweep.csv")).unwrap();
    assert!(csv.starts_with("scheme,alpha,seed,rounds_to_target,final_accuracy,test_accuracy\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("accuracy_curves.csv").exists());
}

#[test]
fn bad_input_exits_with_code_two() {
    let o = fedchain(&["validate-chain", "/nonexistent/ledger.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "n_nodes = \"many\"\n").unwrap();
    let o = fedchain(&["--config", bad.to_str().unwrap(), "show-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(fedchain(&["latency-grid", "--modes", "raft"]).status.code() == Some(2));
}

#[test]
fn write_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let o = fedchain(&["write-fixture", path.to_str().unwrap()]);
    assert!(o.status.success());
    let d = fedchain::fed::Dataset::load(&path).unwrap();
    assert_eq!(d.len(), 2000);
}
