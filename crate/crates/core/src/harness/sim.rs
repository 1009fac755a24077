//! Decode simulation over held-out prompts, shared by `simulate` and `sweep`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::EvictionPolicy;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{MoEModel, RoutingTrace};
use crate::offload::{quantized_capacity, simulate_decode, DecodeReport, LatencyModel};
use crate::predictor::{build_targets, embed_prompt, train_predictor, PredictorFit, PrefetchPlan, TargetSet};
use crate::rng::stream;

use super::config::{ExperimentConfig, PrefetchMode};

/// One CSV row of a simulation or sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub policy: String,
    /// Inference decay; empty for LRU and LFU.
    pub gamma: Option<f64>,
    pub train_gamma: f64,
    #[serde(rename = "C")]
    pub capacity: usize,
    pub prefetch: PrefetchMode,
    pub transfers_per_layer: f64,
    pub tokens_per_s_est: f64,
    pub lambda_cs: f64,
    pub lambda_rm: f64,
    pub c_sim: usize,
    pub val_nll: f64,
    pub hit_rate: f64,
}

pub fn write_rows(rows: &[SimRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &std::path::Path) -> Result<Vec<SimRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub transfers_per_layer: f64,
    pub tokens_per_s_est: f64,
    pub hit_rate: f64,
    pub n_miss: u64,
    pub estimated_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRecord {
    pub prompt_index: usize,
    pub topic: usize,
    pub plan: Option<PrefetchPlan>,
    pub report: DecodeReport,
    pub trace: RoutingTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub policy: EvictionPolicy,
    /// Effective capacity after the quantisation multiplier.
    pub capacity: usize,
    pub prefetch: PrefetchMode,
    pub summary: SimSummary,
    pub decodes: Vec<DecodeRecord>,
}

/// A trained model with its predictor and evaluation prompts.
pub struct SimContext<'a> {
    pub model: &'a MoEModel,
    pub targets: TargetSet,
    pub predictor: PredictorFit,
    /// Held-out prompts and their topics.
    pub prompts: Vec<(Vec<usize>, usize)>,
    /// Predicted L × E distribution per held-out prompt.
    pub predictions: Vec<Vec<Vec<f64>>>,
    pub latency: LatencyModel,
    pub seed: u64,
    max_tokens: usize,
    capacity_multiplier: f64,
}

/// The first `per_topic` validation prompts of every topic, topic-major.
pub fn eval_prompts(data: &Dataset, prompt_len: usize, per_topic: usize) -> Vec<(Vec<usize>, usize)> {
    let mut out = Vec::new();
    for topic in 0..data.topics.len() {
        out.extend(
            data.val
                .iter()
                .filter(|s| s.topic == topic)
                .take(per_topic)
                .map(|s| (s.prompt(prompt_len).to_vec(), topic)),
        );
    }
    out
}

impl<'a> SimContext<'a> {
    pub fn build(model: &'a MoEModel, data: &Dataset, cfg: &ExperimentConfig) -> Result<Self> {
        let pc = &cfg.predictor;
        let train_prompts: Vec<Vec<usize>> = data.train.iter().map(|s| s.prompt(pc.prompt_len).to_vec()).collect();
        let targets = build_targets(model, &train_prompts, pc.gen_len, &pc.embed)?;
        let predictor = train_predictor(&targets.examples, &pc.hparams)?;
        let prompts = eval_prompts(data, pc.prompt_len, pc.eval_prompts_per_topic);
        if prompts.is_empty() {
            return Err(Error::Config("no held-out prompts to simulate".into()));
        }
        let predictions = prompts
            .iter()
            .map(|(p, _)| predictor.mlp.predict(&embed_prompt(p, &pc.embed)?.v))
            .collect::<Result<_>>()?;
        let sim = &cfg.simulation;
        let latency = if sim.calibrate_compute {
            LatencyModel {
                t_compute_per_token: LatencyModel::calibrated(model, 256)?.t_compute_per_token,
                ..sim.latency
            }
        } else {
            sim.latency
        };
        Ok(Self {
            model,
            targets,
            predictor,
            prompts,
            predictions,
            latency,
            seed: cfg.seed,
            max_tokens: sim.max_tokens,
            capacity_multiplier: sim.capacity_multiplier,
        })
    }

    /// Plan for prompt `i`; random plans depend only on (seed, C, i).
    pub fn plan(&self, i: usize, capacity: usize, mode: PrefetchMode) -> Result<Option<PrefetchPlan>> {
        let c = &self.model.config;
        Ok(match mode {
            PrefetchMode::None => None,
            PrefetchMode::Predictor => Some(PrefetchPlan::from_scores(&self.predictions[i], capacity)?),
            PrefetchMode::Random => {
                let mut rng = stream(self.seed, &format!("random-prefetch/{capacity}/{i}"));
                Some(PrefetchPlan::random(c.layers, c.experts, capacity, &mut rng)?)
            }
        })
    }

    pub fn evaluate(&self, policy: EvictionPolicy, capacity: usize, mode: PrefetchMode) -> Result<Evaluation> {
        let cap = quantized_capacity(capacity, self.capacity_multiplier, self.model.config.experts)?;
        let decodes: Vec<DecodeRecord> = (0..self.prompts.len())
            .into_par_iter()
            .map(|i| {
                let (prompt, topic) = &self.prompts[i];
                let plan = self.plan(i, cap, mode)?;
                let (report, trace) = simulate_decode(
                    self.model,
                    prompt,
                    policy,
                    cap,
                    plan.as_ref(),
                    &self.latency,
                    self.max_tokens,
                )?;
                Ok(DecodeRecord {
                    prompt_index: i,
                    topic: *topic,
                    plan,
                    report,
                    trace,
                })
            })
            .collect::<Result<_>>()?;
        let n = decodes.len() as f64;
        let generated: usize = decodes.iter().map(|d| d.report.generated.len()).sum();
        let seconds: f64 = decodes.iter().map(|d| d.report.estimated_seconds).sum();
        let summary = SimSummary {
            transfers_per_layer: decodes.iter().map(|d| d.report.transfers_per_layer()).sum::<f64>() / n,
            tokens_per_s_est: if seconds > 0.0 { generated as f64 / seconds } else { 0.0 },
            hit_rate: decodes.iter().map(|d| d.report.hit_rate).sum::<f64>() / n,
            n_miss: decodes.iter().map(|d| d.report.n_miss).sum(),
            estimated_seconds: seconds,
        };
        Ok(Evaluation {
            policy,
            capacity: cap,
            prefetch: mode,
            summary,
            decodes,
        })
    }

    pub fn row(&self, ev: &Evaluation, weights: &LossWeights, val_nll: f64) -> SimRow {
        SimRow {
            policy: ev.policy.name().to_string(),
            gamma: ev.policy.gamma(),
            train_gamma: weights.gamma,
            capacity: ev.capacity,
            prefetch: ev.prefetch,
            transfers_per_layer: ev.summary.transfers_per_layer,
            tokens_per_s_est: ev.summary.tokens_per_s_est,
            lambda_cs: weights.lambda_cs,
            lambda_rm: weights.lambda_rm,
            c_sim: weights.c_sim,
            val_nll,
            hit_rate: ev.summary.hit_rate,
        }
    }
}

/// One line of `traces.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub prompt_index: usize,
    pub topic: usize,
    pub prefetch: PrefetchMode,
    pub top_k: usize,
    /// `[layer][token][expert]` router probabilities.
    pub probs: Vec<Vec<Vec<f64>>>,
    /// `[layer][token]` requested expert ids.
    pub requests: Vec<Vec<Vec<usize>>>,
}

impl TraceRecord {
    pub fn new(d: &DecodeRecord, prefetch: PrefetchMode) -> Self {
        let t = &d.trace;
        Self {
            prompt_index: d.prompt_index,
            topic: d.topic,
            prefetch,
            top_k: t.top_k,
            probs: (0..t.layers)
                .map(|l| (0..t.tokens).map(|i| t.probs(l, i).to_vec()).collect())
                .collect(),
            requests: (0..t.layers)
                .map(|l| (0..t.tokens).map(|i| t.requests(l, i).to_vec()).collect())
                .collect(),
        }
    }

    pub fn to_trace(&self) -> Result<RoutingTrace> {
        let layers = self.probs.len();
        let tokens = self.probs.first().map_or(0, |l| l.len());
        let experts = self.probs.first().and_then(|l| l.first()).map_or(0, |r| r.len());
        let probs = self.probs.iter().flatten().flatten().copied().collect();
        let requests = self.requests.iter().flatten().cloned().collect();
        RoutingTrace::new(layers, tokens, experts, self.top_k, probs, requests)
    }
}
