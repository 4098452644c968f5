use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use densemtl_core::harness::{DatasetSpec, ExperimentConfig, RunReport};
use densemtl_core::model::EncoderSpec;
use densemtl_core::Task;

fn densemtl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densemtl")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = densemtl(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, iterations: usize) -> String {
    let mut c = ExperimentConfig::default();
    c.name = "cli".into();
    c.iterations = iterations;
    c.batch_size = 2;
    c.log_every = 0;
    c.model.tasks = vec![Task::Seg, Task::Depth];
    c.model.num_classes = 4;
    c.model.encoder = EncoderSpec { widths: vec![8, 8, 8, 8], blocks_per_stage: 1 };
    c.dataset = DatasetSpec::Synthetic { seed: 0, count: 4, size: 32 };
    let path = dir.join(format!("cfg-{iterations}.toml"));
    fs::write(&path, c.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_then_evaluate_against_saved_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, 3);
    ok(&["synth", "--out", "data", "--count", "4", "--size", "32", "--classes", "4"], d);
    assert!(d.join("data/intrinsics.json").exists());

    ok(&["train", "--config", &cfg, "--seed", "7", "--out", "run"], d);
    let trained = RunReport::load(&d.join("run/report.json")).unwrap();
    assert_eq!((trained.seed, trained.losses.len()), (Some(7), 3));
    // the saved config records the seed override
    assert!(fs::read_to_string(d.join("run/config.toml")).unwrap().contains("seed = 7"));

    ok(&["eval", "--ckpt", "run/model.safetensors", "--data", "data", "--out", "eval.json", "--metrics-csv", "m.csv"], d);
    let first = RunReport::load(&d.join("eval.json")).unwrap();
    assert!(first.delta.is_none());
    // synth writes the same scenes the config generates in memory, up to
    // 8-bit image and 32-bit depth quantisation
    for (t, v) in &trained.metrics {
        assert!((first.metrics[t] - v).abs() < 0.01 * v.abs().max(1.0), "{t:?}");
    }

    let json = ok(&["eval", "--ckpt", "run/model.safetensors", "--data", "data", "--stl-baseline", "m.csv"], d);
    let again: RunReport = serde_json::from_str(&json).unwrap();
    assert!(again.delta.unwrap().delta.abs() < 1e-9);
}

#[test]
fn ablate_gridsearch_and_report_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, 0);
    ok(&["ablate", "--config", &cfg, "--axis", "attention", "--out", "abl"], d);
    let table = fs::read_to_string(d.join("abl/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains("attention=channel"));

    fs::write(d.join("grid.toml"), "weights = [[1.0, 1.0], [10.0, 1.0]]\n").unwrap();
    let stdout = ok(&["gridsearch", "--config", &cfg, "--grid", "grid.toml", "--out", "grid"], d);
    assert!(stdout.contains("best weights"));
    assert_eq!(fs::read_to_string(d.join("grid/table.csv")).unwrap().lines().count(), 3);

    ok(&["report", "--runs", "abl/runs", "--out", "merged"], d);
    for f in ["table.csv", "losses.csv", "loss_curves.png", "metrics.png"] {
        assert!(d.join("merged").join(f).exists(), "{f}");
    }
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, 0);
    let text = fs::read_to_string(&cfg).unwrap().replace("iterations = 0", "iterations = 5000");
    fs::write(d.join("bad.toml"), text).unwrap();
    let out = densemtl(&["train", "--config", "bad.toml"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"), "{}", String::from_utf8_lossy(&out.stderr));

    let out = densemtl(&["ablate", "--config", &cfg, "--axis", "colour"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_self_attention"));

    let out = densemtl(&["report", "--runs", ".", "--out", "empty"], d);
    assert!(!out.status.success());
}
