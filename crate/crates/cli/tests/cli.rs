use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bootsemi_core::io::{load_checkpoint, save_checkpoint, save_labels, save_tensor, Checkpoint};
use bootsemi_core::model::{init_params, ParamSet};
use bootsemi_core::{ExperimentConfig, Tensor};
use serde_json::Value;

const FAST: &str = r#"
seed = 4

[data]
per_class = 30
labeled_fraction = 0.2

[pretrain]
epochs = 1
batch_size = 16

[finetune]
epochs = 3
pseudo_k = 10
rounds = 2

[grid]
epochs_list = [1]
eta_list = [0.05]
pseudo_k_list = [5]
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bootsemi")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("cfg.toml"), config).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_str().unwrap().to_string()
    }

    fn cfg(&self) -> String {
        self.path("cfg.toml")
    }
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn manifest_names(m: &Value) -> Vec<String> {
    m["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap().to_string()).collect()
}

#[test]
fn synth_writes_all_splits_with_manifest() {
    let ws = Workspace::new(FAST);
    ok(&["synth", "--config", &ws.cfg(), "--out", &ws.path("a")]);
    ok(&["synth", "--config", &ws.cfg(), "--out", &ws.path("b")]);
    let (a, b) = (json(ws.root.join("a/manifest.json")), json(ws.root.join("b/manifest.json")));
    assert_eq!(a, b);
    let names = manifest_names(&a);
    assert_eq!(names.len(), 7);
    for n in &names {
        assert!(ws.root.join("a").join(n).exists(), "{n}");
    }
    let counts: u64 = a["files"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|f| f["name"].as_str().unwrap().ends_with(".tnsr"))
        .map(|f| f["count"].as_u64().unwrap())
        .sum();
    assert_eq!(counts, 4 * 30);
}

#[test]
fn fully_labeled_data_has_no_unlabeled_file() {
    let ws = Workspace::new("[data]\nper_class = 10\nlabeled_fraction = 1.0\n");
    ok(&["synth", "--config", &ws.cfg(), "--out", &ws.path("d")]);
    let names = manifest_names(&json(ws.root.join("d/manifest.json")));
    assert_eq!(names.len(), 6);
    assert!(!names.iter().any(|n| n.starts_with("unlabeled")));
    assert!(!ws.root.join("d/unlabeled_images.tnsr").exists());
}

#[test]
fn seed_flag_changes_the_data() {
    let ws = Workspace::new(FAST);
    ok(&["synth", "--config", &ws.cfg(), "--out", &ws.path("a")]);
    ok(&["synth", "--config", &ws.cfg(), "--out", &ws.path("b"), "--seed", "99"]);
    assert_ne!(json(ws.root.join("a/manifest.json")), json(ws.root.join("b/manifest.json")));
}

#[test]
fn zero_epoch_pretrain_is_the_initialization() {
    let ws = Workspace::new(&format!("{FAST}\n").replace("epochs = 1\n", "epochs = 0\n"));
    let d = ws.path("d");
    ok(&["synth", "--config", &ws.cfg(), "--out", &d]);
    ok(&["pretrain", "--config", &ws.cfg(), "--out", &d]);
    let cfg = ExperimentConfig::load(ws.cfg()).unwrap();
    let ckpt = load_checkpoint(ws.root.join("d/pretrain.ckpt")).unwrap();
    let init = init_params(&cfg.model, cfg.pretrain.seed()).unwrap();
    assert_eq!(ckpt.online, init);
    assert_eq!(ckpt.target.unwrap(), init.without(bootsemi_core::Component::Predictor));
    let csv = fs::read_to_string(ws.root.join("d/pretrain_loss.csv")).unwrap();
    assert_eq!(csv, "step,loss\n");
}

#[test]
fn pretrain_trace_has_one_row_per_step() {
    let ws = Workspace::new(FAST);
    let d = ws.path("d");
    ok(&["synth", "--config", &ws.cfg(), "--out", &d]);
    ok(&["pretrain", "--config", &ws.cfg(), "--out", &d]);
    let csv = fs::read_to_string(ws.root.join("d/pretrain_loss.csv")).unwrap();
    // 120 examples, 70% train = 84 images, batch 16 → 5 steps per epoch.
    assert_eq!(csv.lines().count(), 1 + 5);
    for line in csv.lines().skip(1) {
        let loss: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=8.0).contains(&loss));
    }
}

#[test]
fn missing_dataset_is_an_io_error_naming_the_path() {
    let ws = Workspace::new(FAST);
    let out = run(&["pretrain", "--config", &ws.cfg(), "--out", &ws.path("empty")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labeled_images.tnsr"));
}

#[test]
fn config_and_usage_errors_exit_with_one() {
    let ws = Workspace::new("[pretrain]\nepochz = 3\n");
    assert_eq!(run(&["synth", "--config", &ws.cfg(), "--out", &ws.path("x")]).status.code(), Some(1));
    let ws = Workspace::new("[finetune]\neta = -1.0\n");
    assert_eq!(run(&["synth", "--config", &ws.cfg(), "--out", &ws.path("x")]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["synth", "--config", &ws.path("nope.toml")]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn selftrain_writes_consistent_artifacts() {
    let ws = Workspace::new(FAST);
    let d = ws.path("d");
    ok(&["synth", "--config", &ws.cfg(), "--out", &d]);
    ok(&["pretrain", "--config", &ws.cfg(), "--out", &d]);
    let ckpt = ws.path("d/pretrain.ckpt");
    ok(&["selftrain", "--config", &ws.cfg(), "--checkpoint", &ckpt, "--data", &d, "--out", &ws.path("s")]);
    let summary = json(ws.root.join("s/summary.json"));
    let rounds = fs::read_to_string(ws.root.join("s/rounds.csv")).unwrap();
    let accs: Vec<f64> = rounds.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(rounds.lines().next().unwrap(), "round,split,accuracy");
    assert_eq!(accs.len(), 2);
    let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(summary["accuracy"].as_f64().unwrap(), max);
    let best = summary["best_round"].as_u64().unwrap() as usize;
    assert_eq!(accs[best], max);
    assert_eq!(summary["config"]["finetune"]["pseudo_k"].as_u64(), Some(10));
    assert!(load_checkpoint(ws.root.join("s/best_model.ckpt")).unwrap().target.is_none());

    // The saved model scores the same through `eval`.
    let out = ok(&[
        "eval",
        "--checkpoint",
        &ws.path("s/best_model.ckpt"),
        "--images",
        &ws.path("d/test_images.tnsr"),
        "--labels",
        &ws.path("d/test_labels.lbls"),
        "--out",
        &ws.path("e"),
    ]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, json(ws.root.join("e/eval.json")));
    assert_eq!(printed["accuracy"].as_f64(), summary["test_accuracy"].as_f64());
}

#[test]
fn single_round_without_pseudo_labels_picks_round_zero() {
    let ws = Workspace::new(&FAST.replace("pseudo_k = 10\nrounds = 2", "pseudo_k = 0\nrounds = 1"));
    let d = ws.path("d");
    ok(&["synth", "--config", &ws.cfg(), "--out", &d]);
    ok(&["pretrain", "--config", &ws.cfg(), "--out", &d]);
    ok(&["selftrain", "--config", &ws.cfg(), "--checkpoint", &ws.path("d/pretrain.ckpt"), "--out", &d]);
    assert_eq!(json(ws.root.join("d/summary.json"))["best_round"].as_u64(), Some(0));
}

#[test]
fn mismatched_checkpoint_is_a_contract_error() {
    let ws = Workspace::new(FAST);
    let d = ws.path("d");
    ok(&["synth", "--config", &ws.cfg(), "--out", &d]);
    let other = bootsemi_core::NetworkSpec {
        encoder_dims: vec![10, 5],
        ..Default::default()
    };
    let ckpt = Checkpoint {
        online: init_params(&other, 0).unwrap(),
        target: None,
    };
    save_checkpoint(ws.root.join("bad.ckpt"), &ckpt).unwrap();
    let out = run(&["selftrain", "--config", &ws.cfg(), "--checkpoint", &ws.path("bad.ckpt"), "--out", &d]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("contract"));
}

/// Four one-pixel-per-class images, identity encoder, and a chosen head.
fn stub_eval(ws: &Workspace, head_weight: Tensor, head_bias: Vec<f64>) -> Value {
    let mut p = ParamSet::new();
    p.insert("encoder.0.weight", Tensor::identity(4));
    p.insert("encoder.0.bias", Tensor::zeros(&[4]));
    p.insert("head.0.weight", head_weight);
    p.insert("head.0.bias", Tensor::vector(head_bias));
    save_checkpoint(ws.root.join("stub.ckpt"), &Checkpoint { online: p, target: None }).unwrap();
    let labels = vec![0, 1, 2, 3, 3, 2, 1, 0];
    let mut pixels = Vec::new();
    for &l in &labels {
        pixels.extend((0..4).map(|i| if i == l { 1.0 } else { 0.0 }));
    }
    save_tensor(ws.root.join("x.tnsr"), &Tensor::new(vec![8, 2, 2, 1], pixels).unwrap()).unwrap();
    save_labels(ws.root.join("y.lbls"), &labels).unwrap();
    let out = ok(&[
        "eval",
        "--checkpoint",
        &ws.path("stub.ckpt"),
        "--images",
        &ws.path("x.tnsr"),
        "--labels",
        &ws.path("y.lbls"),
    ]);
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn eval_of_stub_models() {
    let ws = Workspace::new("");
    let perfect = stub_eval(&ws, Tensor::identity(4), vec![0.0; 4]);
    assert_eq!(perfect["accuracy"].as_f64(), Some(1.0));
    let constant = stub_eval(&ws, Tensor::zeros(&[4, 4]), vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(constant["accuracy"].as_f64(), Some(0.25));
    let confusion = constant["confusion"].as_array().unwrap();
    let diag: u64 = (0..4).map(|c| confusion[c][c].as_u64().unwrap()).sum();
    let total: u64 = confusion.iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(diag as f64 / total as f64, 0.25);
    assert!(!ws.root.join("eval.json").exists());
}

#[test]
fn one_cell_grid_selects_that_cell() {
    let ws = Workspace::new(FAST);
    let d = ws.path("d");
    ok(&["synth", "--config", &ws.cfg(), "--out", &d]);
    ok(&["gridsearch", "--config", &ws.cfg(), "--out", &d]);
    let best = json(ws.root.join("d/grid_best.json"));
    assert_eq!(best["epochs"].as_u64(), Some(1));
    assert_eq!(best["eta"].as_f64(), Some(0.05));
    assert_eq!(best["pseudo_k"].as_u64(), Some(5));
    let grid = fs::read_to_string(ws.root.join("d/grid.csv")).unwrap();
    assert_eq!(grid.lines().next(), Some("eta,epochs_1"));
    assert_eq!(grid.lines().count(), 2);
    let acc: f64 = grid.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(best["accuracy"].as_f64(), Some(acc));
    let timing = fs::read_to_string(ws.root.join("d/grid_timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 3);
}
