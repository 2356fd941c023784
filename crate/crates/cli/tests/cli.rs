use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use cbin_core::Checkpoint;
use serde_json::Value;
use tempfile::TempDir;

fn cbin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbin")).args(args).output().expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("error record is JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const TOY: &str = r#"
label = "bin"
output_dir = "toy"
[dataset]
kind = "toy_line"
[architecture]
hidden = [16]
activation = "relu"
[train]
warmup_epochs = 300
epochs = 300
lr = 0.01
batch_size = 6
[inference]
split = "train"
"#;

const CHAIN: &str = r#"
output_dir = "chain"
[dataset]
kind = "gaussian_chain"
n_vars = 3
size = 600
seed = 2
[architecture]
hidden = []
activation = "identity"
[train]
warmup_epochs = 80
epochs = 0
lr = 0.01
batch_size = 32
seed = 2
"#;

#[test]
fn toy_training_is_fast_and_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let start = Instant::now();
    let summary = ok_json(&cbin(&["train", "--config", cfg.to_str().unwrap()]));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let hash = summary["config_hash"].as_str().unwrap();
    let ckpt = Checkpoint::load(dir.path().join("toy/model.ckpt")).unwrap();
    assert_eq!(ckpt.metadata["config_hash"], hash);
    assert_eq!(ckpt.metadata["label"], "bin");
    let log = fs::read_to_string(dir.path().join("toy/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 600);
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["config_hash"], hash);
    }
}

#[test]
fn training_is_reproducible_from_config_and_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "toy.toml", TOY);
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    ok_json(&cbin(&["train", "--config", cfg, "--seed", "4", "--out", a.to_str().unwrap()]));
    ok_json(&cbin(&["train", "--config", cfg, "--seed", "4", "--out", b.to_str().unwrap()]));
    ok_json(&cbin(&["train", "--config", cfg, "--seed", "5", "--out", c.to_str().unwrap()]));
    let bytes = |p: &Path| fs::read(p.join("model.ckpt")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn zero_weight_cbin_config_gives_the_bin_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cbin_cfg = TOY.replace("label = \"bin\"", "label = \"cbin\"").replace("[train]", "[train]\nlambda_c = 0.0\ninner_iters = 8");
    let b = write(dir.path(), "bin.toml", TOY);
    let c = write(dir.path(), "cbin.toml", &cbin_cfg);
    ok_json(&cbin(&["train", "--config", b.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap()]));
    ok_json(&cbin(&["train", "--config", c.to_str().unwrap(), "--out", dir.path().join("c").to_str().unwrap()]));
    let load = |d: &str| Checkpoint::load(dir.path().join(d).join("model.ckpt")).unwrap();
    let (b, c) = (load("b"), load("c"));
    assert_eq!(b.model, c.model);
    assert_eq!(b.standardizer, c.standardizer);
    assert_eq!(c.metadata["label"], "cbin");
}

#[test]
fn missing_dataset_fails_without_partial_output() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "derm.toml",
        "output_dir = \"out\"\n[dataset]\nkind = \"dermatology\"\npath = \"no/such/file.data\"\n",
    );
    let rec = err_json(&cbin(&["train", "--config", cfg.to_str().unwrap()]));
    assert_eq!(rec["status"], "error");
    assert_eq!(rec["command"], "train");
    assert_eq!(rec["kind"], "data");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn invalid_config_is_reported() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.toml", &format!("{TOY}\nbatch = 3\n"));
    let rec = err_json(&cbin(&["train", "--config", cfg.to_str().unwrap()]));
    assert_eq!(rec["kind"], "config");
    let cfg = write(dir.path(), "bad2.toml", &TOY.replace("batch_size = 6", "batch_size = 0"));
    assert_eq!(err_json(&cbin(&["train", "--config", cfg.to_str().unwrap()]))["command"], "train");
}

fn trained_chain(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write(dir, "chain.toml", CHAIN);
    ok_json(&cbin(&["train", "--config", cfg.to_str().unwrap()]));
    (cfg, dir.join("chain/model.ckpt"))
}

fn predictions(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn infer_selects_the_cheapest_mode() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = trained_chain(dir.path());
    let (cfg, ckpt) = (cfg.to_str().unwrap(), ckpt.to_str().unwrap());
    let fwd = dir.path().join("fwd.csv");
    let s = ok_json(&cbin(&["infer", "--config", cfg, "--checkpoint", ckpt, "--targets", "v2,v3", "--out", fwd.to_str().unwrap()]));
    assert_eq!(s["tasks"][0]["modes"], serde_json::json!(["forward"]));
    assert_eq!(s["tasks"][0]["mean_iterations"], 0.0);
    let rows = predictions(&fwd);
    assert_eq!(rows.len(), 120);
    assert!(rows.iter().all(|r| r[3] == "forward" && r[4] == "0"));
    assert!(dir.path().join("fwd_stats.csv").exists());

    let s = ok_json(&cbin(&["infer", "--config", cfg, "--checkpoint", ckpt, "--targets", "v1,v3", "--out", dir.path().join("h.csv").to_str().unwrap()]));
    assert_eq!(s["tasks"][0]["modes"], serde_json::json!(["hybrid"]));

    let s = ok_json(&cbin(&["infer", "--config", cfg, "--checkpoint", ckpt, "--targets", "v1", "--out", dir.path().join("g.csv").to_str().unwrap()]));
    assert_eq!(s["tasks"][0]["modes"], serde_json::json!(["general"]));
}

#[test]
fn forced_general_mode_agrees_with_forward() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = trained_chain(dir.path());
    let (cfg, ckpt) = (cfg.to_str().unwrap(), ckpt.to_str().unwrap());
    let f = dir.path().join("f.csv");
    let g = dir.path().join("g.csv");
    ok_json(&cbin(&["infer", "--config", cfg, "--checkpoint", ckpt, "--targets", "v2,v3", "--out", f.to_str().unwrap()]));
    ok_json(&cbin(&["infer", "--config", cfg, "--checkpoint", ckpt, "--targets", "v2,v3", "--mode", "general", "--out", g.to_str().unwrap()]));
    for (a, b) in predictions(&f).iter().zip(predictions(&g)) {
        assert_eq!(b[3], "general");
        for col in 7..9 {
            let (x, y): (f64, f64) = (a[col].parse().unwrap(), b[col].parse().unwrap());
            assert!((x - y).abs() < 1e-2, "{x} vs {y}");
        }
    }
}

#[test]
fn infer_rejects_unknown_variables_and_bad_checkpoints() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = trained_chain(dir.path());
    let (cfg, ckpt) = (cfg.to_str().unwrap(), ckpt.to_str().unwrap());
    let rec = err_json(&cbin(&["infer", "--config", cfg, "--checkpoint", ckpt, "--targets", "v7"]));
    assert!(rec["message"].as_str().unwrap().contains("v7"));
    let junk = write(dir.path(), "junk.ckpt", "not a checkpoint");
    assert_eq!(err_json(&cbin(&["infer", "--config", cfg, "--checkpoint", junk.to_str().unwrap()]))["kind"], "checkpoint");
}

#[test]
fn infer_baselines() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = trained_chain(dir.path());
    let (cfg, ckpt) = (cfg.to_str().unwrap(), ckpt.to_str().unwrap());
    for (b, label) in [("prior_only", "PO"), ("ri", "RI"), ("retrain", "Retrain")] {
        let out = dir.path().join(format!("{b}.csv"));
        let s = ok_json(&cbin(&["infer", "--config", cfg, "--checkpoint", ckpt, "--targets", "v1", "--baseline", b, "--out", out.to_str().unwrap()]));
        assert_eq!(s["method"], label);
    }
}

#[test]
fn suite_writes_tables_and_grid() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = trained_chain(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let cbin_cfg = write(dir.path(), "chain_cbin.toml", &CHAIN.replace("epochs = 0", "epochs = 2\nlambda_c = 0.5\ninner_iters = 4").replace("output_dir = \"chain\"", "label = \"cbin\"\noutput_dir = \"chain_cbin\""));
    ok_json(&cbin(&["train", "--config", cbin_cfg.to_str().unwrap()]));
    let cbin_ckpt = dir.path().join("chain_cbin/model.ckpt");
    let out = dir.path().join("suite");
    let s = ok_json(&cbin(&[
        "suite",
        "--config",
        cfg_s,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--checkpoint",
        cbin_ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let hash = s["config_hash"].as_str().unwrap();
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    // 4 methods x 6 target subsets
    assert_eq!(results.lines().count(), 1 + 24);
    assert!(results.lines().skip(1).all(|l| l.starts_with(hash)));
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(rows, ["method", "PO", "RI", "BIN", "CBIN"]);
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 3);
    assert!(grid.lines().nth(2).unwrap().contains(",4,0.5,"));
}

#[test]
fn suite_reports_missing_checkpoints() {
    let dir = TempDir::new().unwrap();
    let (cfg, ckpt) = trained_chain(dir.path());
    let rec = err_json(&cbin(&["suite", "--config", cfg.to_str().unwrap(), "--checkpoint", &format!("bin={}", ckpt.display())]));
    assert_eq!(rec["kind"], "missing_checkpoint");
    assert!(rec["message"].as_str().unwrap().contains("CBIN"));
    assert!(!dir.path().join("chain/results.csv").exists());
}

#[test]
fn generated_data_round_trips_through_csv_loader() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "chain.toml", CHAIN);
    let out = dir.path().join("data.csv");
    let s = ok_json(&cbin(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(s["rows"], 600);
    let d = s["features"].as_u64().unwrap() as usize;
    let features: Vec<String> = (1..=d).map(|i| i.to_string()).collect();
    let csv_cfg = format!(
        "[dataset]\nkind = \"csv\"\npath = \"data.csv\"\nhas_header = true\nfeatures = [{}]\ntargets = [{}, {}, {}]\nnames = [\"v1\", \"v2\", \"v3\"]\n",
        features.join(", "),
        d + 1,
        d + 2,
        d + 3
    );
    let csv_cfg = write(dir.path(), "csv.toml", &csv_cfg);
    let back = write(dir.path(), "back.csv", "");
    let s2 = ok_json(&cbin(&["gen-data", "--config", csv_cfg.to_str().unwrap(), "--out", back.to_str().unwrap()]));
    assert_eq!(s2["rows"], 600);
    let body = |p: &Path| -> Vec<String> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    assert_eq!(body(&out), body(&back));
}
