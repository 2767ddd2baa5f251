use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ooc_core::checkpoint::save_checkpoint;
use ooc_core::metrics::Metrics;
use ooc_core::{ModelConfig, ModelParams};

fn ooc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ooc"))
        .args(args)
        .env_remove("OOC_VLM_ENDPOINT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ooc(args);
    assert!(
        out.status.success(),
        "ooc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three-way synthetic data plus an untrained checkpoint matching it.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&["synth", "--out", s(&data), "--n", "60", "--seed", "4", "--split", "all", "--d-v", "8", "--d-t", "8", "--d-mm", "6"]);
    let mut config = ModelConfig::new(8, 8, 6);
    config.n_heads = 2;
    config.hidden_mm = 5;
    let params = ModelParams::init(&config, 0).unwrap();
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&params, &config, &ckpt).unwrap();
    (data, ckpt)
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--n", "100", "--seed", "1", "--out", s(d)]);
    }
    for f in ["manifest.json", "samples.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn synth_empty_and_split_layout() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    ok(&["synth", "--n", "0", "--out", s(&empty)]);
    let (m, samples) = ooc_core::load_dataset(&empty).unwrap();
    assert!(samples.is_empty());
    assert_eq!(m.sample_count, 0);

    let all = dir.path().join("all");
    ok(&["synth", "--n", "50", "--split", "all", "--out", s(&all)]);
    let counts: Vec<usize> = ["train", "validation", "test"]
        .iter()
        .map(|split| {
            let (m, samples) = ooc_core::load_dataset(all.join(split)).unwrap();
            assert_eq!(m.split.as_str(), *split);
            samples.len()
        })
        .collect();
    assert_eq!(counts, [40, 5, 5]);

    let test_only = dir.path().join("t");
    ok(&["synth", "--n", "3", "--split", "test", "--out", s(&test_only)]);
    assert_eq!(ooc_core::load_dataset(&test_only).unwrap().0.split.as_str(), "test");
}

#[test]
fn invalid_usage_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = ooc(&["synth", "--falsified-fraction", "1.5", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("falsified-fraction"));
    assert!(!dir.path().join("manifest.json").exists());

    assert_eq!(ooc(&["params", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(ooc(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn every_command_has_help() {
    for cmd in ["synth", "train", "eval", "predict", "explain", "params"] {
        let text = ok(&[cmd, "--help"]);
        assert!(text.contains("Usage: ooc"), "{cmd}");
        assert!(text.contains("--help"), "{cmd}");
    }
    assert!(ok(&["synth", "--help"]).contains("[default: 0.5]"));
    assert!(ok(&["train", "--help"]).contains("else 64]"));
}

#[test]
fn params_reproduces_table_rows() {
    assert_eq!(ok(&["params"]).trim(), "10498577 (10.5 M)");
    assert!(ok(&["params", "--vision", "alt", "--text", "alt"]).contains("(5.2 M)"));
    assert!(ok(&["params", "--text", "alt", "--drop-labels", "--drop-pages"]).contains("(4.0 M)"));
    assert!(ok(&["params", "--drop-labels"]).contains("(8.1 M)"));
    assert!(ok(&["params", "--drop-labels", "--drop-pages"]).contains("(5.8 M)"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[model]\nd_v = 16\nd_t = 8\nd_mm = 12\nn_heads = 4\nhidden_mm = 7\n").unwrap();
    let mut c = ModelConfig::new(16, 8, 12);
    c.n_heads = 4;
    c.hidden_mm = 7;
    let expected = ooc_core::count_parameters(&c);
    assert!(ok(&["params", "--config", s(&cfg)]).starts_with(&format!("{expected} ")));
}

fn effective_config(ckpt: &Path) -> toml::Value {
    let mut p = ckpt.as_os_str().to_owned();
    p.push(".config.toml");
    fs::read_to_string(PathBuf::from(p)).unwrap().parse().unwrap()
}

#[test]
fn train_defaults_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let ckpt = dir.path().join("trained.ckpt");
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--max-epochs", "1", "--heads", "2", "--quiet"]);
    let cfg = effective_config(&ckpt);
    assert_eq!(cfg["train"]["batch_size"].as_integer(), Some(64));
    assert_eq!(cfg["train"]["lr_rescale"].as_float(), Some(1.0));
    let mut history = ckpt.as_os_str().to_owned();
    history.push(".history.json");
    let history: serde_json::Value = serde_json::from_str(&fs::read_to_string(PathBuf::from(history)).unwrap()).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 1);

    // config file values, then flags on top
    let run = dir.path().join("run.toml");
    fs::write(&run, "[train]\nbatch_size = 16\nmax_epochs = 1\n").unwrap();
    ok(&["train", "--config", s(&run), "--data", s(&data), "--out", s(&ckpt), "--heads", "2", "--lr-rescale", "single-device", "--quiet"]);
    let cfg = effective_config(&ckpt);
    assert_eq!(cfg["train"]["batch_size"].as_integer(), Some(16));
    let r = cfg["train"]["lr_rescale"].as_float().unwrap();
    assert!((r - 1.0 / 3f64.sqrt()).abs() < 1e-15);
    ok(&["train", "--config", s(&run), "--data", s(&data), "--out", s(&ckpt), "--heads", "2", "--batch-size", "8", "--quiet"]);
    assert_eq!(effective_config(&ckpt)["train"]["batch_size"].as_integer(), Some(8));

    // the written configuration reproduces the run
    let again = dir.path().join("again.ckpt");
    let copy = dir.path().join("copy.toml");
    fs::copy(format!("{}.config.toml", s(&ckpt)), &copy).unwrap();
    ok(&["train", "--config", s(&copy), "--out", s(&again), "--quiet"]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn train_needs_a_validation_split() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    fs::remove_dir_all(data.join("validation")).unwrap();
    let out = ooc(&["train", "--data", s(&data), "--out", s(&dir.path().join("m.ckpt"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nbatch = 3\n").unwrap();
    let out = ooc(&["train", "--config", s(&bad), "--data", s(&data), "--out", "x"]);
    assert!(!out.status.success());
}

#[test]
fn predict_agrees_with_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let report = dir.path().join("metrics.json");
    let table = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    let metrics: Metrics = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(table.starts_with("test accuracy (0.5)"));
    assert_eq!(table.lines().count(), 5);

    let json: Metrics = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--json"])).unwrap();
    assert_eq!(json, metrics);

    let lines = ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let (mut correct, mut total) = (0, 0);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let falsified = v["p_class"].as_f64().unwrap() >= 0.5;
        correct += usize::from(falsified == (v["label"].as_u64() == Some(1)));
        total += 1;
    }
    assert_eq!(total, 6);
    assert_eq!(correct as f64 / total as f64, metrics.accuracy_at_half);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = fixture(dir.path());
    let other = dir.path().join("other");
    ok(&["synth", "--out", s(&other), "--n", "20", "--split", "all", "--d-v", "4", "--d-t", "8", "--d-mm", "6"]);
    let out = ooc(&["eval", "--checkpoint", s(&ckpt), "--data", s(&other)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimensions"));
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

#[test]
fn explain_with_stub_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let got = ok(&["explain", "--checkpoint", s(&ckpt), "--data", s(&data), "--sample-id", "synth-4-000055", "--endpoint", "stub"]);
    let path = golden("explain_stub.jsonl");
    if std::env::var_os("OOC_UPDATE_GOLDEN").is_some() {
        fs::write(&path, &got).unwrap();
    }
    assert_eq!(got, fs::read_to_string(path).unwrap());
    let v: serde_json::Value = serde_json::from_str(got.trim()).unwrap();
    assert!(v["generated_text"].as_str().unwrap().starts_with("STUB["));

    let all = ok(&["explain", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(all.lines().count(), 6);
}

#[test]
fn explain_failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let out = ooc(&["explain", "--checkpoint", s(&ckpt), "--data", s(&data), "--sample-id", "nope"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}/generate");
    let out = ooc(&[
        "explain", "--checkpoint", s(&ckpt), "--data", s(&data), "--sample-id", "synth-4-000055",
        "--endpoint", &endpoint, "--timeout-secs", "2",
    ]);
    assert!(!out.status.success());
    // the report is still emitted, carrying the error
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["prompt"].as_str().unwrap().contains("Caption:"));
    assert!(v["error"].is_string());

    let out = ooc(&[
        "explain", "--checkpoint", s(&ckpt), "--data", s(&data), "--sample-id", "synth-4-000055",
        "--endpoint", &endpoint, "--require-image",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("image"));
}

#[test]
fn endpoint_comes_from_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = fixture(dir.path());
    let run = dir.path().join("run.toml");
    fs::write(&run, "vlm_endpoint = \"http://127.0.0.1:9/unreachable\"\n").unwrap();
    let args = ["explain", "--config", s(&run), "--checkpoint", s(&ckpt), "--data", s(&data), "--sample-id", "synth-4-000055", "--timeout-secs", "2"];
    assert!(!ooc(&args).status.success());
    let mut with_flag = args.to_vec();
    with_flag.extend(["--endpoint", "stub"]);
    assert!(ooc(&with_flag).status.success());
}
