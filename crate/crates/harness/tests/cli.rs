use std::fs;
use std::path::Path;
use std::process::Command;

use snp_harness::cli;
use snp_harness::config::{AlphaSchedule, DataTask, ModelChoice, RunConfig, SizePreset};
use snp_harness::metrics::MetricsLog;
use snp_harness::record::{self, AnyEpisode};

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("snp").chain(args.iter().copied()))
}

fn tiny_config(dir: &Path, iterations: u64) -> RunConfig {
    let mut c = RunConfig::new(DataTask::A, ModelChoice::Snp, iterations, dir);
    c.size = SizePreset::Micro;
    c.train_episodes = 8;
    c.eval_episodes = 3;
    c.batch = Some(2);
    c.alpha = AlphaSchedule::At(2);
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_writes_one_record_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(run(&["gen-data", "--task", "a", "--count", "10", "--seed", "1", "--out", out.to_str().unwrap()]), 0);
    let eps = record::load_dir(&out).unwrap();
    assert_eq!(eps.len(), 10);
    assert!(eps.iter().all(|e| matches!(e, AnyEpisode::Gp(_))));

    let scenes = dir.path().join("s");
    let code = run(&[
        "gen-data", "--task", "tracking", "--count", "2", "--seed", "1", "--steps", "4", "--out", scenes.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    match &record::load_dir(&scenes).unwrap()[0] {
        AnyEpisode::Shapes(e) => assert_eq!(e.len(), 4),
        other => panic!("expected a scene episode, got {other:?}"),
    }
}

#[test]
fn resume_continues_the_iteration_counter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(dir.path(), 3));
    assert_eq!(run(&["train", "--config", &cfg]), 0);
    let cfg = write_config(dir.path(), &tiny_config(dir.path(), 5));
    assert_eq!(run(&["train", "--config", &cfg, "--resume"]), 0);
    let rows = MetricsLog::read(&dir.path().join("metrics.csv")).unwrap();
    let its: Vec<u64> = rows.iter().filter(|r| r.metric == "loss").map(|r| r.iteration).collect();
    assert_eq!(its, vec![0, 1, 2, 3, 4]);
}

#[test]
fn eval_writes_per_episode_rows_and_a_mean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(dir.path(), 2));
    assert_eq!(run(&["train", "--config", &cfg]), 0);
    let ck = dir.path().join("checkpoint.snpc");
    let log = dir.path().join("eval.csv");
    let code = run(&[
        "eval", "--checkpoint", ck.to_str().unwrap(), "--metric", "nll-is", "--k", "40", "--log", log.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let rows = MetricsLog::read(&log).unwrap();
    let per: Vec<f64> = rows.iter().filter(|r| r.metric == "nll_is").map(|r| r.value).collect();
    assert_eq!(per.len(), 3);
    let mean = rows.iter().find(|r| r.metric == "nll_is_mean").unwrap().value;
    assert!((mean - per.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert!(rows.iter().all(|r| r.iteration == 2 && r.split == "eval"));

    assert_eq!(run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--metric", "target-nll", "--samples", "2", "--log", log.to_str().unwrap()]), 0);
    let rows = MetricsLog::read(&log).unwrap();
    assert!(rows.iter().any(|r| r.metric == "target_nll_t01"));
    assert!(rows.iter().any(|r| r.metric == "target_nll_mean"));

    let png = dir.path().join("curves.png");
    let code = run(&["plot", "curves", "--metrics", log.to_str().unwrap(), "--metric", "target_nll", "--out", png.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(png.exists());

    let f = dir.path().join("function.png");
    let code = run(&["plot", "function", "--checkpoint", ck.to_str().unwrap(), "--step", "3", "--out", f.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(f.exists());

    // a scene metric on a 1D model is a runtime error
    assert_eq!(run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--metric", "pixel-mse", "--log", log.to_str().unwrap()]), 1);
}

#[test]
fn plotting_missing_metrics_fails_without_an_image() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("m.csv");
    MetricsLog::create(&log).unwrap().flush().unwrap();
    let png = dir.path().join("x.png");
    let code = run(&["plot", "curves", "--metrics", log.to_str().unwrap(), "--metric", "pixel_mse", "--out", png.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(!png.exists());
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_snp");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap();

    let bad = status(&["frobnicate"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("Usage"));
    assert_eq!(status(&["gen-data", "--bogus"]).status.code(), Some(2));

    for sub in ["gen-data", "train", "eval", "plot"] {
        let out = status(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub} --help");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }

    let missing = status(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(missing.status.code(), Some(1));
}
