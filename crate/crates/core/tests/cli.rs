//! Command-line behaviour: exit codes, configuration echo, one-line errors
//! and the artifacts of a tiny end-to-end run.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cddpm::config::ExperimentConfig;

const TINY: &str = "\
seed = 3
t_test = [250, 500]
data.healthy_train = 4
data.healthy_val = 1
data.healthy_test = 1
data.unhealthy_val = 2
data.unhealthy_test = 2
train.steps = 4
train.batch_size = 2
train.val_every = 2
pretrain.steps = 2
evaluation.sweep_levels = [250, 500]
evaluation.contrast_levels = [2.0]
evaluation.permutation_rounds = 50
";

fn cddpm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cddpm")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_one_line_error(out: &Output) {
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    assert!(err.starts_with("error: "), "stderr: {err}");
}

#[test]
fn missing_config_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cddpm(&["--config", "/nonexistent/cfg.toml", "--out", path(dir.path()), "phantoms"]);
    assert_one_line_error(&out);
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "train.no_such_key = 1\n").unwrap();
    let out = cddpm(&["--config", path(&cfg), "--out", path(dir.path()), "phantoms"]);
    assert_one_line_error(&out);
}

#[test]
fn evaluate_without_reconstructions_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = cddpm(&["--config", path(&cfg), "--out", path(dir.path()), "evaluate"]);
    assert_one_line_error(&out);
}

#[test]
fn report_without_runs_is_a_usage_error() {
    let out = cddpm(&["report"]);
    assert!(!out.status.success());
}

#[test]
fn phantoms_echo_the_effective_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let out = cddpm(&["--config", path(&cfg), "--seed", "9", "--preset", "ddpm", "--out", path(&data), "phantoms"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let echoed = ExperimentConfig::load(data.join("config.txt")).unwrap();
    let mut expected = ExperimentConfig::from_toml(TINY).unwrap();
    expected.seed = 9;
    expected.preset = "ddpm".into();
    assert_eq!(echoed, expected);

    let split = fs::read_to_string(data.join("split.txt")).unwrap();
    assert_eq!(split.lines().count(), 4 + 1 + 1 + 2 + 2);
    assert!(data.join("manifest.json").exists());
}

#[test]
fn step_by_step_run_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let base = ["--config", path(&cfg), "--out"];

    let ok = |extra: &[&str], out_dir: &Path| {
        let mut args: Vec<&str> = base.to_vec();
        args.push(path(out_dir));
        args.extend_from_slice(extra);
        let out = cddpm(&args);
        assert!(out.status.success(), "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["phantoms"], &data);
    ok(&["pretrain", "--data", path(&data)], &run);
    ok(&["train", "--data", path(&data)], &run);
    ok(&["reconstruct", "--data", path(&data), "--sweep", "--contrast"], &run);
    let eval = ok(&["evaluate", "--data", path(&data)], &run);
    let stdout = String::from_utf8_lossy(&eval.stdout);
    assert!(stdout.contains("dice"), "{stdout}");
    assert!(stdout.contains(" ± "), "{stdout}");

    for f in [
        "encoder.ck",
        "model.ck",
        "metrics.csv",
        "summary.csv",
        "threshold_search.csv",
        "ablation.csv",
        "reconstruction.csv",
        "sweep.csv",
        "contrast.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain+train+reconstruct+evaluate");

    let report = dir.path().join("report");
    ok(&["report", "--data", path(&data), path(&run)], &report);
    assert!(report.join("table.csv").exists());
}
