//! End-to-end checks of the `s6snn` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use s6snn::layers::{Model, ModelConfig};
use s6snn::train::save_checkpoint;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_s6snn"));
    c.env_remove("S6_OUTPUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config(out: &Path) -> serde_json::Value {
    serde_json::json!({
        "model": { "num_blocks": 2, "num_neurons": 64, "state_dim": 4 },
        "training": { "lr": 0.01, "batch_size": 8, "epochs": 1, "seed": 3 },
        "data": { "task": "adding", "len": 16, "train_count": 16, "val_count": 8, "test_count": 8, "seed": 1 },
        "eval": { "mode": "eval_sample", "repeats": 2, "batch_size": 8 },
        "output_dir": out,
    })
}

fn write_json(path: &Path, v: &serde_json::Value) -> PathBuf {
    std::fs::write(path, v.to_string()).unwrap();
    path.to_path_buf()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn smoke_train_writes_artifacts_and_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let cfg = write_json(&dir.path().join("cfg.json"), &smoke_config(&a));
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.s6ck", "metrics.jsonl", "manifest.json", "test_metrics.json"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["kind"], "epoch");
    assert_eq!(lines[1]["kind"], "test");

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["root_seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["code_version"].is_string());

    let b = dir.path().join("b");
    let o = run(&["train", "--config", s(&cfg), "--set", &format!("output_dir={}", s(&b))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("metrics.jsonl")).unwrap(), std::fs::read(b.join("metrics.jsonl")).unwrap());

    let c = dir.path().join("c");
    let o = run(&["train", "--manifest", s(&a.join("manifest.json")), "--set", &format!("output_dir={}", s(&c))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("metrics.jsonl")).unwrap(), std::fs::read(c.join("metrics.jsonl")).unwrap());

    let d = dir.path().join("d");
    let o = run(&["train", "--config", s(&cfg), "--set", &format!("output_dir={}", s(&d)), "--set", "training.seed=4"]);
    assert_eq!(code(&o), 0);
    assert_ne!(std::fs::read(a.join("metrics.jsonl")).unwrap(), std::fs::read(d.join("metrics.jsonl")).unwrap());

    // Expected-mode evaluation is deterministic; a corrupted blob is an integrity failure.
    let ck = a.join("checkpoint.s6ck");
    let eval = |ck: &Path| run(&["eval", "--checkpoint", s(ck), "--config", s(&cfg), "--mode", "eval_expected"]);
    let (e1, e2) = (eval(&ck), eval(&ck));
    assert_eq!(code(&e1), 0, "{}", stderr(&e1));
    assert_eq!(e1.stdout, e2.stdout);
    let mut bytes = std::fs::read(&ck).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    let bad = dir.path().join("bad.s6ck");
    std::fs::write(&bad, bytes).unwrap();
    let o = eval(&bad);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("checksum"));
}

#[test]
fn missing_data_path_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(&dir.path().join("out"));
    cfg["data"] = serde_json::json!({ "task": "files", "train": "/nonexistent/train.s6ds" });
    let path = write_json(&dir.path().join("cfg.json"), &cfg);
    let o = run(&["train", "--config", s(&path)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/train.s6ds"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_json(&dir.path().join("cfg.json"), &smoke_config(&dir.path().join("o")));
    for set in ["model.num_neurons=32", "training.typo=1", "training.lr=1"] {
        let o = run(&["train", "--config", s(&path), "--set", set]);
        assert_eq!(code(&o), 2, "{set}: {}", stderr(&o));
    }
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["eval", "--checkpoint", "x", "--data", "y", "--mode", "bogus"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn relative_output_dirs_use_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_json(&dir.path().join("cfg.json"), &smoke_config(Path::new("rel/run")));
    let o = bin()
        .args(["train", "--config", s(&path)])
        .env("S6_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("rel/run/checkpoint.s6ck").exists());
}

#[test]
fn overfit_single_sample_then_evaluate_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let data = dir.path().join("one.s6ds");
    let o = run(&["gen-data", "--task", "adding", "--count", "1", "--len", "16", "--seed", "5", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut cfg = smoke_config(&out);
    cfg["data"] = serde_json::json!({ "task": "files", "train": data, "test": data });
    cfg["training"]["epochs"] = serde_json::json!(200);
    cfg["training"]["lr"] = serde_json::json!(0.05);
    cfg["model"]["readout"] = serde_json::json!("last");
    let path = write_json(&dir.path().join("cfg.json"), &cfg);
    let o = run(&["train", "--config", s(&path)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let last_epoch: serde_json::Value = std::fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"epoch\""))
        .last()
        .map(|l| serde_json::from_str(l).unwrap())
        .unwrap();
    assert!(last_epoch["train_loss"].as_f64().unwrap() < 1e-2, "{last_epoch}");
    for mode in ["eval_sample", "eval_expected"] {
        let o = run(&["eval", "--checkpoint", s(&out.join("checkpoint.s6ck")), "--data", s(&data), "--mode", mode]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(m["accuracy"], 1.0, "{mode}");
    }
}

#[test]
fn gen_data_is_seed_stable_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, extra: &[&str]| {
        let p = dir.path().join(name);
        let mut args = vec!["gen-data", "--out", s(&p)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        p
    };
    let copy = ["--task", "copy", "--count", "6", "--len", "64", "--lag", "32", "--seed", "2"];
    let a = gen("a.s6ds", &copy);
    let b = gen("b.s6ds", &copy);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ds = s6snn::data::SequenceDataset::load(&a).unwrap();
    ds.validate().unwrap();
    assert_eq!((ds.len(), ds.seq_len(), ds.label_len), (6, 64, 64));
    let empty = gen("e.s6ds", &["--task", "adding", "--count", "0", "--len", "16"]);
    assert_eq!(s6snn::data::SequenceDataset::load(&empty).unwrap().len(), 0);
    let o = run(&["gen-data", "--task", "adding", "--len", "4", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    let mnist = gen(
        "m.s6ds",
        &[
            "--task",
            "mnist",
            "--images",
            concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist/test/images-idx3-ubyte.gz"),
            "--labels",
            concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist/test/labels-idx1-ubyte.gz"),
            "--permutation-seed",
            "42",
        ],
    );
    let ds = s6snn::data::SequenceDataset::load(&mnist).unwrap();
    assert_eq!((ds.seq_len(), ds.meta.permutation_seed), (784, Some(42)));
}

/// Two-block model whose every spiking site has probability `p` (0 or 1) on any input.
fn constant_model(on: bool) -> Model {
    let cfg = ModelConfig {
        num_blocks: 2,
        input_dim: 2,
        num_classes: 10,
        encoder_norm: false,
        ..ModelConfig::tiny(10)
    };
    let mut model = Model::new(cfg, 0);
    let level = if on { 10.0 } else { -10.0 };
    for (name, leaf) in model.params.leaves_mut() {
        let v = if name == "encoder.bias" || name.ends_with("norm.beta") {
            Some(level)
        } else if name == "encoder.w" || name.ends_with(".a") {
            Some(0.0)
        } else if name.ends_with(".b") && name.contains(".ssm.") {
            Some(1.0)
        } else if name.ends_with(".c") {
            Some(1000.0)
        } else {
            None
        };
        if let Some(v) = v {
            leaf.iter_mut().for_each(|x| *x = v);
        }
    }
    model
}

#[test]
fn analyze_constant_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("add.s6ds");
    assert_eq!(code(&run(&["gen-data", "--task", "adding", "--count", "4", "--len", "24", "--out", s(&data)])), 0);
    for on in [false, true] {
        let ck = dir.path().join(format!("{on}.s6ck"));
        save_checkpoint(&constant_model(on), 0, 0, &ck).unwrap();
        let out = dir.path().join(format!("bundle_{on}"));
        let o = run(&["analyze", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let energy: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("energy.json")).unwrap()).unwrap();
        let activity = std::fs::read_to_string(out.join("activity.csv")).unwrap();
        let values: Vec<f64> = activity.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(values.len(), 4 * 24);
        if on {
            assert!(values.iter().all(|v| *v == 1.0));
            let expected = s6snn::analysis::energy_report(&s6snn::analysis::layer_ops(&constant_model(true).config), &[1.0; 4]).unwrap();
            assert_eq!(energy["norm_ops"].as_f64().unwrap(), expected.norm_ops);
        } else {
            assert!(values.iter().all(|v| *v == 0.0));
            assert_eq!(energy["e"], "inf");
        }
        for f in ["raster.csv", "histogram.json", "index.json"] {
            assert!(out.join(f).exists());
        }
    }
}

#[test]
fn incompatible_checkpoint_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.s6ck");
    let model = Model::new(ModelConfig { input_dim: 2, ..ModelConfig::tiny(10) }, 0);
    let mut c = s6snn::train::checkpoint::checkpoint_container(&model, 0, 0);
    let mut meta: serde_json::Value = c.meta.clone();
    meta["config"]["num_neurons"] = serde_json::json!(5);
    c.meta = meta;
    c.write(&ck).unwrap();
    let data = dir.path().join("d.s6ds");
    assert_eq!(code(&run(&["gen-data", "--task", "adding", "--count", "2", "--len", "16", "--out", s(&data)])), 0);
    let o = run(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = run(&["eval", "--checkpoint", s(&dir.path().join("none.s6ck")), "--data", s(&data)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn shipped_configs_validate() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = s6snn::cli::load_config(&path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 4);
}
