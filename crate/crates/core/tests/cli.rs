use std::path::Path;
use std::process::{Command, Output};

fn ahbn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ahbn")).args(args).current_dir(cwd).output().expect("binary runs")
}

const TINY: &str = "[synth]\nnum_items = 6\nrenders_per_item = 2\nqueries_per_item = 1\n\
[arch]\nnum_classes = 6\n[train]\nmax_epochs = 1\npretrain_attribute_epochs = 1\npretrain_landmark_epochs = 1\n";

#[test]
fn unknown_variant_and_bad_config_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = ahbn(&["ablate", "--variants", "full-ahbn,fancy"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(dir.path().join("bad.toml"), "[synth]\nnum_items = 7\n").unwrap();
    let out = ahbn(&["--config", "bad.toml", "gen-data", "--out", "data"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_classes"));

    let out = ahbn(&["--config", "missing.toml", "gradcheck"], dir.path());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn gen_train_eval_round_trip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let out = ahbn(args, p);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["--config", "tiny.toml", "--out", "gen", "gen-data"]);
    assert!(p.join("gen/data/train.manifest").exists());
    for run in ["a", "b"] {
        ok(&["--config", "tiny.toml", "--out", run, "train", "--data", "gen/data"]);
        let ckpt = format!("{run}/checkpoint");
        let eval = format!("{run}-eval");
        ok(&["--config", "tiny.toml", "--out", &eval, "eval", "--checkpoint", &ckpt, "--data", "gen/data"]);
    }
    for file in ["a/metrics.json", "a-eval/metrics.json", "a/loss_curve.csv"] {
        let other = file.replacen('a', "b", 1);
        assert_eq!(std::fs::read(p.join(file)).unwrap(), std::fs::read(p.join(other)).unwrap(), "{file}");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("a-eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config_hash"].as_str().unwrap().len(), 64);
    assert!(metrics["acc_at_k"]["1"].as_f64().is_some());
}

#[test]
fn gradcheck_and_sketch_bench_pass_in_assert_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = ahbn(&["--assert", "--out", "gc", "gradcheck"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(dir.path().join("bench.toml"), "[bench]\nsketch_dims = [8, 64]\ntrials = 300\n").unwrap();
    let out = ahbn(&["--assert", "--config", "bench.toml", "--out", "sb", "sketch-bench"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("sb/metrics.json").exists());
    assert!(dir.path().join("sb/timing.json").exists());
}
