//! Every experiment command on a tiny configuration, plus checkpoint resume
//! and the binary's exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use cliqueflow::config::RunConfig;
use cliqueflow::experiments::{self as ex, Task};
use cliqueflow::trainer::{load_checkpoint, save_checkpoint};

const TINY: &str = r#"{
    "model": {"transformer_dim": 16, "mlp_dim": 16, "n_blocks": 1, "n_heads": 2, "n_registers": 1},
    "training": {"gradient_steps": 12, "batch_size": 6, "warmup": 4, "eval_every": 6, "eval_records": 8},
    "flow": {"N_step": 3},
    "decoding": {"N_beam": 2},
    "es": {"n_pert": 3, "design_steps": 4},
    "toy": {"n_records": 50},
    "experiments": {"n_eval": 5, "timing_sizes": [2, 4], "interp_steps": 2, "decay_sweep": [0.0, 0.4]}
}"#;

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_json(TINY, None).unwrap();
    cfg.paths.out_dir = out.to_path_buf();
    cfg
}

fn table(path: &Path, hash: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let lines: Vec<String> = text.lines().map(String::from).collect();
    assert_eq!(lines.last().unwrap(), &format!("# config_sha256={hash}"), "{}", path.display());
    lines[..lines.len() - 1].to_vec()
}

#[test]
fn every_command_writes_its_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let h = cfg.hash();
    let task = ex::gen_data(&cfg).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap().lines().count(), 50);

    let trainer = ex::train(&cfg, &task, |_| {}).unwrap();
    assert_eq!(trainer.step, 12);
    assert_eq!(table(&dir.path().join("train_log.csv"), &h).len(), 1 + 12);
    let model = ex::load_model(&dir.path().join("model.ckpt")).unwrap();
    let eval = task.eval_records(5);

    let rows = ex::reconstruct(&cfg, &model, eval).unwrap();
    let t = table(&dir.path().join("reconstruct.csv"), &h);
    assert!(t[0].starts_with("omega,n,matched,match_ratio"));
    assert_eq!((rows.len(), t.len()), (3, 4));

    let s = ex::optimize_designs(&cfg, &model, eval, &task.spec).unwrap();
    assert_eq!(s.n_filtered, 1);
    assert_eq!(table(&dir.path().join("optimize_trace.csv"), &h).len(), 1 + 5 * 5);

    let path = ex::interpolate(&cfg, &model, &eval[0], &eval[1], &task.spec).unwrap();
    assert_eq!(path.len(), 3 * (1 + model.shape().n_cliques()));

    let ab = ex::ablate_gradients(&cfg, &model, eval, &task.spec).unwrap();
    let methods: Vec<&str> = ab.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["BP", "BP+W", "ES", "ES+W", "ES-sweep", "ES-sweep"]);

    let timing = ex::timing(&cfg, &model, &task.test).unwrap();
    assert_eq!(timing.iter().map(|r| r.n).collect::<Vec<_>>(), [2, 4]);
    assert_eq!(table(&dir.path().join("timing.csv"), &h)[0], "n,mbo_seconds,decode_seconds");

    let metrics = ex::eval(&cfg, &trainer, eval).unwrap();
    assert!(metrics.iter().all(|(_, v)| v.is_finite()));
    for cmd in ["gen-data", "train", "reconstruct", "optimize", "interpolate", "ablate-gradients", "timing", "eval"] {
        assert!(dir.path().join(format!("summary_{cmd}.txt")).exists(), "{cmd}");
    }
}

#[test]
fn commands_reproduce_bit_for_bit() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |d: &Path| {
        let cfg = tiny(d);
        let task = Task::prepare(&cfg).unwrap();
        let tr = ex::train(&cfg, &task, |_| {}).unwrap();
        ex::optimize_designs(&cfg, &tr.model, task.eval_records(5), &task.spec).unwrap();
        let table = fs::read_to_string(d.join("optimize.csv")).unwrap();
        // the trailing hash covers the output directory, which differs here
        let body: Vec<String> = table.lines().filter(|l| !l.starts_with('#')).map(String::from).collect();
        (fs::read(d.join("model.ckpt")).unwrap(), body)
    };
    let (ra, rb) = (run(a.path()), run(b.path()));
    assert!(ra.0 == rb.0, "checkpoints differ");
    assert_eq!(ra.1, rb.1);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let task = Task::prepare(&cfg).unwrap();
    let full = ex::train(&cfg, &task, |_| {}).unwrap();

    let mut half_cfg = cfg.clone();
    half_cfg.training.gradient_steps = 5;
    half_cfg.paths.checkpoint = Some(dir.path().join("half.ckpt"));
    ex::train(&half_cfg, &task, |_| {}).unwrap();
    let mut resumed = load_checkpoint(dir.path().join("half.ckpt")).unwrap();
    resumed.run(&task.train, &task.val, 12, |_| {});
    for id in full.model.params.ids() {
        assert_eq!(full.model.params.value(id), resumed.model.params.value(id), "{}", full.model.params.name(id));
    }
    save_checkpoint(&resumed, dir.path().join("resumed.ckpt")).unwrap();
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_cliqueflow");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"es": {"sigma": 1}}"#).unwrap();
    let out = Command::new(exe).args(["gen-data", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let missing = Command::new(exe).args(["train", "--config", "/nonexistent/cfg.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let good = dir.path().join("tiny.json");
    fs::write(&good, TINY).unwrap();
    let ok = Command::new(exe)
        .args(["gen-data", "--seed", "3", "--threads", "1", "--profile", "desk", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("run/oracle.json").exists());

    let no_ckpt = Command::new(exe).args(["reconstruct", "--config"]).arg(&good).arg("--out").arg(dir.path().join("run")).output().unwrap();
    assert_eq!(no_ckpt.status.code(), Some(1));
}
