//! End-to-end runs of the `agp` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agp_cli::commands::{AttackRecord, EvalReport};
use agp_cli::exit;
use serde_json::Value;

fn agp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = agp(args);
    assert!(out.status.success(), "agp {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const TINY: &str = r#"
seed = 1

[data]
seed = 3
split = [0.5, 0.25, 0.25]

[data.synthetic]
num_graphs = 40
nodes_min = 5
nodes_max = 8
feature_dim = 4

[backbone]
hidden_dim = 8
layers = 2

[pretrain]
epochs = 2

[pretrain.synthetic]
num_graphs = 40
nodes_min = 5
nodes_max = 8
feature_dim = 4
label_rule = "multi-task"

[train]
warmup_epochs = 2
epochs = 3
bottleneck_dim = 4
lr = 0.01

[attack]
steps = 3

[eval]
repetitions = 2
"#;

struct Fixture {
    _root: tempfile::TempDir,
    dir: PathBuf,
    config: String,
}

impl Fixture {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().to_path_buf();
        let config = dir.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        Self { config: config.to_string_lossy().into_owned(), _root: root, dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.join(name).to_string_lossy().into_owned()
    }

    fn train(&self, name: &str, extra: &[&str]) -> String {
        let out = self.path(name);
        let mut args = vec!["train", "--config", self.config.as_str(), "--out", out.as_str()];
        args.extend(extra);
        ok(&args);
        out
    }
}

fn log_rows(run: &str) -> usize {
    std::fs::read_to_string(Path::new(run).join("log.csv")).unwrap().lines().count() - 1
}

#[test]
fn train_logs_one_row_per_epoch() {
    let f = Fixture::new();
    let run = f.train("agp", &[]);
    assert_eq!(log_rows(&run), 5);
    let summary: Value = serde_json::from_slice(&ok(&["eval", "--run", &run, "--mode", "node"]).stdout).unwrap();
    assert_eq!(summary["mode"], "node");
    for name in ["config.toml", "meta.json", "model.json", "log.csv", "eval-node.json"] {
        assert!(Path::new(&run).join(name).exists(), "{name}");
    }
}

#[test]
fn clean_prompt_logs_no_attack_terms() {
    let f = Fixture::new();
    let run = f.train("cp", &["--set", "train.tuning_mode=clean_prompt", "--set", "train.log_attacked_auc=false"]);
    let log = std::fs::read_to_string(Path::new(&run).join("log.csv")).unwrap();
    for line in log.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!((cols[2], cols[3], cols[5]), ("", "", ""), "{line}");
    }
}

#[test]
fn null_budget_attack_changes_nothing() {
    let f = Fixture::new();
    let run = f.train("null", &["--set", "attack.epsilon=0.0", "--set", "attack.ratio=0.0"]);
    let records: Vec<AttackRecord> = serde_json::from_slice(&ok(&["attack", "--run", &run]).stdout).unwrap();
    assert!(!records.is_empty());
    for r in &records {
        assert_eq!((r.flips_used, r.linf_used), (0, 0.0));
        assert_eq!(r.clean_loss, r.adv_loss);
    }
    let e: EvalReport = serde_json::from_slice(&ok(&["eval", "--run", &run]).stdout).unwrap();
    assert_eq!(e.drop, 0.0);
}

#[test]
fn node_attack_flips_no_edges_and_topology_attack_leaves_features() {
    let f = Fixture::new();
    let run = f.train("modes", &[]);
    let node: Vec<AttackRecord> = serde_json::from_slice(&ok(&["attack", "--run", &run, "--mode", "node"]).stdout).unwrap();
    assert!(node.iter().all(|r| r.flips_used == 0 && r.linf_used <= 0.8));
    assert!(node.iter().any(|r| r.linf_used > 0.0));
    let topo: Vec<AttackRecord> = serde_json::from_slice(&ok(&["attack", "--run", &run, "--mode", "topology"]).stdout).unwrap();
    assert!(topo.iter().all(|r| r.linf_used == 0.0));
}

#[test]
fn report_matches_reaggregated_evaluations() {
    let f = Fixture::new();
    let runs: Vec<String> = (0..3).map(|s| f.train(&format!("r{s}"), &["--seed", &s.to_string()])).collect();
    let mut hybrid = Vec::new();
    let mut clean = Vec::new();
    for run in &runs {
        let e: EvalReport = serde_json::from_slice(&ok(&["eval", "--run", run, "--mode", "hybrid"]).stdout).unwrap();
        hybrid.push(e.attacked_auc);
        clean.push(e.clean_auc);
    }
    let args: Vec<&str> = ["report"].into_iter().chain(runs.iter().map(String::as_str)).collect();
    let csv = String::from_utf8(ok(&args).stdout).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    let get = |name: &str| -> f64 { rows[0][headers.iter().position(|h| h == name).unwrap()].parse().unwrap() };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64]| (v.iter().map(|x| (x - mean(v)).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
    assert!((get("hybrid_mean") - mean(&hybrid)).abs() < 1e-6);
    assert!((get("hybrid_std") - std(&hybrid)).abs() < 1e-6);
    assert!((get("clean_mean") - mean(&clean)).abs() < 1e-6);
    assert_eq!(&rows[0][0], "agp");
    assert_eq!(&rows[0][1], "3");
}

#[test]
fn report_refuses_runs_on_different_data() {
    let f = Fixture::new();
    let a = f.train("a", &[]);
    let b = f.train("b", &["--set", "data.seed=4"]);
    let out = agp(&["report", &a, &b]);
    assert_eq!(out.status.code(), Some(exit::DATA));
}

#[test]
fn changed_dataset_is_detected_when_reopening_a_run() {
    let f = Fixture::new();
    let run = f.train("moved", &[]);
    let cfg = Path::new(&run).join("config.toml");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("seed = 3", "seed = 4");
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(agp(&["attack", "--run", &run]).status.code(), Some(exit::DATA));
}

#[test]
fn exit_codes_are_stable() {
    let f = Fixture::new();
    let out = f.path("x");
    assert_eq!(agp(&["train", "--config", "/no/such.toml", "--out", &out]).status.code(), Some(exit::CONFIG));
    assert_eq!(agp(&["train", "--set", "train.gamma=-1", "--out", &out]).status.code(), Some(exit::CONFIG));
    assert_eq!(agp(&["attack", "--run", &f.path("missing")]).status.code(), Some(exit::DATA));
    let bad = f.path("bad.jsonl");
    std::fs::write(&bad, "{not json\n").unwrap();
    let set = format!("data.path=\"{bad}\"");
    let code = agp(&["train", "--config", &f.config, "--set", &set, "--out", &out]).status.code();
    assert_eq!(code, Some(exit::DATA));
    // nothing is left behind by failed runs
    assert!(!Path::new(&out).exists());
    let first = f.train("twice", &[]);
    let again = agp(&["train", "--config", &f.config, "--out", &first]);
    assert_eq!(again.status.code(), Some(exit::CONFIG));
}

#[test]
fn pretrained_checkpoint_feeds_training() {
    let f = Fixture::new();
    let pre = f.path("pre");
    let summary: Value = serde_json::from_slice(&ok(&["pretrain", "--config", &f.config, "--out", &pre]).stdout).unwrap();
    assert_eq!(summary["epochs"], 2);
    let set = format!("backbone.checkpoint=\"{pre}\"");
    let run = f.train("tuned", &["--set", &set]);
    assert_eq!(log_rows(&run), 5);
    let missing = format!("backbone.checkpoint=\"{}\"", f.path("nope"));
    let out = f.path("y");
    assert_eq!(agp(&["train", "--config", &f.config, "--set", &missing, "--out", &out]).status.code(), Some(exit::CONFIG));
}

#[test]
fn verify_theorem_reports_every_scenario() {
    let v: Value = serde_json::from_slice(&ok(&["verify-theorem", "--scenarios", "7", "--seed", "2"]).stdout).unwrap();
    assert_eq!(v["scenarios"].as_array().unwrap().len(), 7);
    assert_eq!(v["pass"], true);
    assert!(v["max_deviation"].as_f64().unwrap() <= 1e-8);
}
