use std::path::Path;
use std::process::Command;
use std::time::Instant;

use moe_locality::cache::EvictionPolicy;
use moe_locality::harness::{
    cmd_report, cmd_simulate, cmd_sweep, cmd_train, ExperimentConfig, BASE_CHECKPOINT_FILE, CHECKPOINT_FILE,
    DECODE_REPORT_FILE, METRICS_FILE, SIMULATE_CSV, TRACES_FILE,
};
use moe_locality::model::ModelConfig;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(5);
    cfg.model = ModelConfig {
        layers: 2,
        experts: 6,
        hidden: 8,
        ffn: 8,
        max_len: 12,
        ..cfg.model
    };
    cfg.data.seqs_per_topic = 20;
    cfg.data.seq_len = 12;
    if let Some(p) = &mut cfg.pretrain {
        p.epochs = 2;
    }
    cfg.train.epochs = 2;
    cfg.train.weights.c_sim = 2;
    cfg.predictor.hparams.hidden = 16;
    cfg.predictor.hparams.epochs = 5;
    cfg.predictor.prompt_len = 4;
    cfg.predictor.gen_len = 4;
    cfg.predictor.eval_prompts_per_topic = 3;
    cfg.simulation.capacity = 2;
    cfg.simulation.max_tokens = 4;
    cfg.sweep.lambda_cs = vec![cfg.train.weights.lambda_cs];
    cfg.sweep.lambda_rm = vec![cfg.train.weights.lambda_rm];
    cfg.sweep.train_gamma = vec![cfg.train.weights.gamma];
    cfg.sweep.c_sim = vec![2];
    cfg.sweep.policies = vec!["lfu".into()];
    cfg.sweep.capacity = vec![2];
    cfg.sweep.prefetch = cfg.simulation.prefetch.clone();
    cfg.sweep.include_baseline = false;
    cfg.validate().unwrap();
    cfg
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

/// metrics.csv without its trailing wall-time column.
fn metrics_without_time(dir: &Path) -> Vec<String> {
    String::from_utf8(read(dir, METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn smoke_train_is_fast_and_deterministic() {
    let cfg = tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    cmd_train(&cfg, a.path(), None).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    cmd_train(&cfg, b.path(), None).unwrap();
    assert_eq!(read(a.path(), CHECKPOINT_FILE), read(b.path(), CHECKPOINT_FILE));
    assert_eq!(
        read(a.path(), BASE_CHECKPOINT_FILE),
        read(b.path(), BASE_CHECKPOINT_FILE)
    );
    assert_eq!(metrics_without_time(a.path()), metrics_without_time(b.path()));

    // Fine-tuning from the saved base reproduces the checkpoint.
    let c = tempfile::tempdir().unwrap();
    cmd_train(&cfg, c.path(), Some(&a.path().join(BASE_CHECKPOINT_FILE))).unwrap();
    assert_eq!(read(a.path(), CHECKPOINT_FILE), read(c.path(), CHECKPOINT_FILE));

    for dir in [a.path(), b.path()] {
        cmd_simulate(&cfg, &dir.join(CHECKPOINT_FILE), dir).unwrap();
    }
    for f in [SIMULATE_CSV, DECODE_REPORT_FILE, TRACES_FILE] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs");
    }
}

#[test]
fn single_point_sweep_equals_simulate() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path(), None).unwrap();
    let sim = cmd_simulate(&cfg, &dir.path().join(CHECKPOINT_FILE), dir.path()).unwrap();
    let sweep = cmd_sweep(&cfg, dir.path(), None, 1).unwrap();
    assert_eq!(cfg.sweep.eviction_policies(), vec![EvictionPolicy::Lfu]);
    assert_eq!(sim, sweep);
    let report = cmd_report(dir.path()).unwrap();
    assert_eq!(report.len(), sweep.len());
}

#[test]
fn sweep_rows_cover_the_grid_with_baseline() {
    let mut cfg = tiny();
    cfg.sweep.lambda_cs = vec![0.5, 1.0];
    cfg.sweep.policies = vec!["lru".into(), "gamma_cache".into()];
    cfg.sweep.gamma = vec![0.5, 0.9];
    cfg.sweep.prefetch = vec![moe_locality::harness::PrefetchMode::None];
    cfg.sweep.include_baseline = true;
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_sweep(&cfg, dir.path(), None, 2).unwrap();
    // (baseline + 2 λ points) × (lru + 2 γ) × one C × one prefetch mode.
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().any(|r| r.lambda_cs == 0.0 && r.lambda_rm == 0.0));
    let report = cmd_report(dir.path()).unwrap();
    assert!(report.iter().all(|r| r.reduction_vs_baseline.is_some()));
}

#[test]
fn empty_grid_is_a_usage_error() {
    let mut cfg = tiny();
    cfg.sweep.capacity.clear();
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_sweep(&cfg, dir.path(), None, 1).unwrap_err().to_string();
    assert!(err.contains("capacity"), "{err}");
}

#[test]
fn cli_names_a_missing_config_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = serde_json::to_value(tiny()).unwrap();
    v["train"].as_object_mut().unwrap().remove("learning_rate");
    let path = dir.path().join("config.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_moe-locality"))
        .args([
            "--config",
            path.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "train",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rate"), "{stderr}");
}

#[test]
fn cli_simulate_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_moe-locality"))
        .args(["--out", dir.path().to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}
