//! Commands behind the CLI: data generation, training, simulation, sweeps
//! and reports. Every command is a function of (config, seed).

pub mod checkpoint;
pub mod config;
pub mod sim;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::MoEModel;
use crate::predictor::write_jsonl;
use crate::rng::stream;
use crate::train::{evaluate, train, MetricsHistory, TrainConfig, TrainOutcome};

pub use checkpoint::{load_model, save_model, Checkpoint};
pub use config::{ExperimentConfig, PrefetchMode, SweepGrid, SCHEMA_VERSION};
pub use sim::{read_rows, write_rows, Evaluation, SimContext, SimRow, TraceRecord};

pub const DATASET_FILE: &str = "dataset.json";
pub const BASE_CHECKPOINT_FILE: &str = "base_checkpoint.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain_metrics.csv";
pub const SIMULATE_CSV: &str = "simulate.csv";
pub const DECODE_REPORT_FILE: &str = "decode_report.json";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const PREDICTOR_FILE: &str = "predictor.json";
pub const PREDICTOR_DATA_FILE: &str = "predictor_dataset.jsonl";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const REPORT_FILE: &str = "report.json";

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    ensure_dir(out)?;
    let data = generate_dataset(&cfg.data)?;
    std::fs::write(out.join(DATASET_FILE), serde_json::to_string(&data)?)?;
    Ok(data)
}

/// The model fine-tuning starts from: loaded from `base`, or initialised from
/// the seed and pretrained when the config asks for it.
pub fn base_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
    base: Option<&Path>,
) -> Result<(MoEModel, Option<MetricsHistory>)> {
    if let Some(path) = base {
        let m = load_model(path)?;
        if m.config != cfg.model {
            return Err(Error::Config(
                "base checkpoint model config differs from the experiment config".into(),
            ));
        }
        return Ok((m, None));
    }
    let init = MoEModel::init(cfg.model.clone(), &mut stream(cfg.seed, "init"))?;
    match &cfg.pretrain {
        None => Ok((init, None)),
        Some(pc) => {
            let out = train(&init, data, pc)?;
            if let Some(epoch) = out.diverged {
                return Err(Error::Diverged {
                    component: "pretraining loss".into(),
                    epoch,
                });
            }
            Ok((out.model, Some(out.history)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub data: Dataset,
    pub base: MoEModel,
    pub outcome: TrainOutcome,
}

/// Writes `checkpoint.json` and `metrics.csv` (and the base checkpoint when
/// it was pretrained here). A diverged run keeps its last good checkpoint
/// and returns an error.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, base: Option<&Path>) -> Result<TrainArtifacts> {
    cfg.validate()?;
    ensure_dir(out)?;
    let data = generate_dataset(&cfg.data)?;
    let (base_model, pre_history) = base_model(cfg, &data, base)?;
    if let Some(h) = pre_history {
        save_model(&base_model, &out.join(BASE_CHECKPOINT_FILE))?;
        h.save_csv(&out.join(PRETRAIN_METRICS_FILE))?;
    }
    let outcome = train(&base_model, &data, &cfg.train)?;
    save_model(&outcome.model, &out.join(CHECKPOINT_FILE))?;
    outcome.history.save_csv(&out.join(METRICS_FILE))?;
    if let Some(epoch) = outcome.diverged {
        return Err(Error::Diverged {
            component: "training loss".into(),
            epoch,
        });
    }
    Ok(TrainArtifacts {
        data,
        base: base_model,
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub prefetch: PrefetchMode,
    pub summary: sim::SimSummary,
    pub reports: Vec<crate::offload::DecodeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub policy: crate::cache::EvictionPolicy,
    pub capacity: usize,
    pub latency: crate::offload::LatencyModel,
    pub predictor_losses: Vec<f64>,
    pub skipped_prompts: usize,
    pub modes: Vec<DecodeSummary>,
}

/// Trains the predictor on `checkpoint`, decodes the held-out prompts under
/// each configured prefetch mode and writes CSV, JSON and trace files.
pub fn cmd_simulate(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Vec<SimRow>> {
    cfg.validate()?;
    ensure_dir(out)?;
    let model = load_model(checkpoint)?;
    let data = generate_dataset(&cfg.data)?;
    let ctx = SimContext::build(&model, &data, cfg)?;
    let val_nll = evaluate(&model, &data.val, cfg.train.weights.gamma, cfg.train.weights.c_sim)?.nll;
    let sim = &cfg.simulation;
    let mut rows = Vec::new();
    let mut modes = Vec::new();
    let mut traces = std::io::BufWriter::new(std::fs::File::create(out.join(TRACES_FILE))?);
    for &mode in &sim.prefetch {
        let ev = ctx.evaluate(sim.policy, sim.capacity, mode)?;
        rows.push(ctx.row(&ev, &cfg.train.weights, val_nll));
        for d in &ev.decodes {
            serde_json::to_writer(&mut traces, &TraceRecord::new(d, mode))?;
            traces.write_all(b"\n")?;
        }
        modes.push(DecodeSummary {
            prefetch: mode,
            summary: ev.summary,
            reports: ev.decodes.into_iter().map(|d| d.report).collect(),
        });
    }
    traces.flush()?;
    write_rows(&rows, &out.join(SIMULATE_CSV))?;
    write_jsonl(&ctx.targets.examples, &out.join(PREDICTOR_DATA_FILE))?;
    Checkpoint::from_predictor(&ctx.predictor.mlp)?.save(&out.join(PREDICTOR_FILE))?;
    let report = SimulationReport {
        policy: sim.policy,
        capacity: sim.capacity,
        latency: ctx.latency,
        predictor_losses: ctx.predictor.losses.clone(),
        skipped_prompts: ctx.targets.skipped,
        modes,
    };
    std::fs::write(out.join(DECODE_REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(rows)
}

/// Rows of one trained grid point across the inference grid.
fn sweep_point(cfg: &ExperimentConfig, data: &Dataset, base: &MoEModel, weights: &LossWeights) -> Result<Vec<SimRow>> {
    let tc = TrainConfig {
        weights: weights.clone(),
        ..cfg.train.clone()
    };
    let outcome = train(base, data, &tc)?;
    if let Some(epoch) = outcome.diverged {
        return Err(Error::Diverged {
            component: format!("sweep point λ_cs={} λ_rm={}", weights.lambda_cs, weights.lambda_rm),
            epoch,
        });
    }
    let model = outcome.model;
    let val_nll = evaluate(&model, &data.val, weights.gamma, weights.c_sim)?.nll;
    let ctx = SimContext::build(&model, data, cfg)?;
    let mut rows = Vec::new();
    for policy in cfg.sweep.eviction_policies() {
        for &c in &cfg.sweep.capacity {
            for &mode in &cfg.sweep.prefetch {
                let ev = ctx.evaluate(policy, c, mode)?;
                rows.push(ctx.row(&ev, weights, val_nll));
            }
        }
    }
    Ok(rows)
}

/// Trains every (λ_cs, λ_rm, γ, C_sim) point from the shared base model and
/// evaluates each across (policy, γ, C, prefetch). Points run in parallel on
/// `workers` threads; rows keep grid order.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, base: Option<&Path>, workers: usize) -> Result<Vec<SimRow>> {
    cfg.validate()?;
    ensure_dir(out)?;
    let data = generate_dataset(&cfg.data)?;
    let (base_model, _) = base_model(cfg, &data, base)?;
    let points = cfg.sweep.train_points(&cfg.train.weights);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let per_point: Vec<Vec<SimRow>> = pool.install(|| {
        points
            .par_iter()
            .map(|w| sweep_point(cfg, &data, &base_model, w))
            .collect::<Result<_>>()
    })?;
    let rows: Vec<SimRow> = per_point.into_iter().flatten().collect();
    write_rows(&rows, &out.join(SWEEP_CSV))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    #[serde(flatten)]
    pub row: SimRow,
    /// Baseline (λ_cs = λ_rm = 0) transfers over this row's transfers, at the
    /// same inference setting.
    pub reduction_vs_baseline: Option<f64>,
}

/// Summarises `sweep.csv` in `out` into `report.json`.
pub fn cmd_report(out: &Path) -> Result<Vec<ReportRow>> {
    let rows = read_rows(&out.join(SWEEP_CSV))?;
    if rows.is_empty() {
        return Err(Error::Config("sweep grid is empty; nothing to report".into()));
    }
    let same_setting = |a: &SimRow, b: &SimRow| {
        a.policy == b.policy
            && a.gamma == b.gamma
            && a.capacity == b.capacity
            && a.prefetch == b.prefetch
            && a.train_gamma == b.train_gamma
            && a.c_sim == b.c_sim
    };
    let report: Vec<ReportRow> = rows
        .iter()
        .map(|r| {
            let base = rows
                .iter()
                .find(|b| b.lambda_cs == 0.0 && b.lambda_rm == 0.0 && same_setting(b, r));
            ReportRow {
                row: r.clone(),
                reduction_vs_baseline: base
                    .filter(|_| r.transfers_per_layer > 0.0)
                    .map(|b| b.transfers_per_layer / r.transfers_per_layer),
            }
        })
        .collect();
    std::fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
