use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
rounds = 6
aggregator = "sybilwall"

[network]
honest_nodes = 10
degree_bound = 8
radius = 0.6

[dataset]
kind = "blobs"
classes = 4
dim = 6
train_per_class = 20
test_per_class = 10
spread = 0.05

[partition]
alpha = 0.5

[train]
learning_rate = 0.5
local_epochs = 1
batch_size = 4

[attack]
kind = "label_flip"
phi = 1.0
t1 = 0
t2 = 1

[gossip]
signature = "keyed_hash"
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn sybilwall(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sybilwall"))
        .args(args)
        .env_remove("SYBILWALL_OUT_DIR")
        .env_remove("SYBILWALL_WORKERS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_and_rejects() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let ok = sybilwall(&["validate", "--config", s(&cfg)]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));

    let cfg = write_config(tmp.path(), &SMALL.replace("aggregator = \"sybilwall\"\n", ""));
    let bad = sybilwall(&["validate", "--config", s(&cfg)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("aggregator"), "{}", stderr(&bad));

    let cfg = write_config(tmp.path(), &SMALL.replace("alpha = 0.5", "alpha = 0.0"));
    let bad = sybilwall(&["run", "--config", s(&cfg)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("partition.alpha"));

    let missing = sybilwall(&["validate", "--config", s(&tmp.path().join("nope.toml"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn run_writes_reproducible_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (dir, workers) in [(&a, "1"), (&b, "3")] {
        let out = sybilwall(&["run", "--config", s(&cfg), "--out-dir", s(dir), "--workers", workers]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(csv.lines().next().unwrap(), "round,mean_accuracy,mean_attack_score");
    assert_eq!(csv, std::fs::read_to_string(b.join("metrics.csv")).unwrap());

    let manifest = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["aggregator"], "sybilwall");
    assert!(manifest["git_describe"].is_string());

    let c = tmp.path().join("c");
    let out = sybilwall(&["run", "--config", s(&cfg), "--out-dir", s(&c), "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let reseeded = std::fs::read_to_string(c.join("metrics.csv")).unwrap();
    assert_ne!(csv, reseeded);
    let manifest = std::fs::read_to_string(c.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 4"));
}

#[test]
fn out_dir_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let dir = tmp.path().join("env");
    let out = Command::new(env!("CARGO_BIN_EXE_sybilwall"))
        .args(["run", "--config", s(&cfg)])
        .env("SYBILWALL_OUT_DIR", &dir)
        .env("SYBILWALL_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.join("metrics.csv").exists());
}

#[test]
fn phi_sweep_summary_matches_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("sweep");
    let out = sybilwall(&["sweep", "--config", s(&cfg), "--out-dir", s(&out_dir), "--axis", "phi", "--values", "0.5,1,2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "phi,round,mean_accuracy,mean_attack_score");
    assert_eq!(lines.len(), 4);
    for (line, value) in lines[1..].iter().zip(["0.5", "1", "2"]) {
        let csv = std::fs::read_to_string(out_dir.join(format!("phi-{value}")).join("metrics.csv")).unwrap();
        assert_eq!(*line, format!("{value},{}", csv.lines().last().unwrap()));
    }
}

#[test]
fn aggregator_sweep_runs_every_rule() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("rounds = 6", "rounds = 3"));
    let out_dir = tmp.path().join("sweep");
    let all = "fedavg,foolsgold,krum,multikrum,median,sybilwall,sybilwall+median,sybilwall+wmedian,sybilwall+krumfilter";
    let out = sybilwall(&["sweep", "-c", s(&cfg), "--out-dir", s(&out_dir), "--axis", "aggregator", "--values", all]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 10);
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 10);
}

#[test]
fn sweep_rejects_bad_values_before_running() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out_dir = tmp.path().join("sweep");
    let out = sybilwall(&["sweep", "-c", s(&cfg), "--out-dir", s(&out_dir), "--axis", "alpha", "--values", "0.1,-1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
    let out = sybilwall(&["sweep", "-c", s(&cfg), "--out-dir", s(&out_dir), "--axis", "aggregator", "--values", "trimmed"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("trimmed"));
}

#[test]
fn topology_reports_scenario_and_writes_json() {
    let tmp = TempDir::new().unwrap();
    for (phi, scenario) in [("4.0", "dense"), ("0.1", "sparse"), ("1.0", "distributed")] {
        let cfg = write_config(tmp.path(), &SMALL.replace("phi = 1.0", &format!("phi = {phi}")));
        let dir = tmp.path().join(format!("topo{phi}"));
        let out = sybilwall(&["topology", "-c", s(&cfg), "--out-dir", s(&dir)]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert!(stdout(&out).contains(&format!("scenario {scenario}")), "{}", stdout(&out));

        let topo: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("topology.json")).unwrap()).unwrap();
        assert_eq!(topo["nodes"].as_array().unwrap().len(), 10);
        assert_eq!(topo["degree_bound"], 8);
        let sybils = topo["sybils"].as_array().unwrap();
        for e in topo["edges"].as_array().unwrap() {
            let e = e.as_array().unwrap();
            assert_eq!(e.len(), 2);
            assert!(e[0].as_u64().unwrap() < e[1].as_u64().unwrap());
        }

        let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("plan.json")).unwrap()).unwrap();
        assert_eq!(plan["sybil_count"].as_u64().unwrap() as usize, sybils.len());
        assert_eq!(plan["scenario"], scenario);
        let want = (10.0 * phi.parse::<f64>().unwrap()).ceil() as usize;
        assert_eq!(plan["attack_edges"].as_array().unwrap().len(), want);
    }
}

#[test]
fn runtime_failures_exit_with_three() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL.replace(
        "kind = \"blobs\"\nclasses = 4\ndim = 6\ntrain_per_class = 20\ntest_per_class = 10\nspread = 0.05",
        &format!("kind = \"mnist\"\ndir = \"{}\"", tmp.path().join("absent").display()),
    );
    let cfg = write_config(tmp.path(), &text);
    let out = sybilwall(&["run", "-c", s(&cfg), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
