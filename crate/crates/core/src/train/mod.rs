//! Fine-tuning loop: combined objective, AdamW, parameter-subset policy.

pub mod fd;
pub mod grad;
pub mod lora;
pub mod optim;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{hard_miss_count, CacheInit};
use crate::data::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{model_forward, nll_loss, MoEModel, RoutingTrace};
use crate::rng::stream;
use crate::tensor::Matrix;

pub use fd::{finite_difference_grad, max_relative_error};
pub use grad::{backward, evaluate_objective, flatten, unflatten, GradMask, GradMode, GradientReport, LossComponents};
pub use lora::{apply_lora, ExpertAdapters, LoRAAdapter, LoraSet};
pub use optim::{lr_at, AdamW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSet {
    /// Routers and expert gate projections (plus adapters when enabled).
    #[default]
    RouterGate,
    /// Every parameter; used to pretrain the base model.
    All,
}

impl TrainableSet {
    pub fn mask(self) -> GradMask {
        match self {
            TrainableSet::RouterGate => GradMask::router_gate(),
            TrainableSet::All => GradMask::all(),
        }
    }
}

fn default_warmup() -> f64 {
    0.03
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    #[serde(default)]
    pub grad_mode: GradMode,
    #[serde(default)]
    pub lora_rank: Option<usize>,
    #[serde(default)]
    pub trainable: TrainableSet,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Toy-scale fine-tuning defaults.
    pub fn toy(weights: LossWeights, seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 16,
            weights,
            grad_mode: GradMode::SoftRoute,
            lora_rank: None,
            trainable: TrainableSet::RouterGate,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidArgument("warmup_ratio must be in [0,1]".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        if self.lora_rank == Some(0) {
            return Err(Error::InvalidArgument("lora_rank must be >= 1 when set".into()));
        }
        self.weights.validate()
    }

    fn grad_mask(&self) -> GradMask {
        let mut m = self.trainable.mask();
        if self.lora_rank.is_some() {
            m.up = true;
            m.down = true;
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_nll: f64,
    /// Cache loss with binary requests.
    pub l_cs: f64,
    pub l_rm: f64,
    /// Validation, hard γ-cache at the training γ and `c_sim`, uniform start.
    pub transfers_per_layer: f64,
    pub val_nll: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsHistory {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.epochs {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let epochs = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { epochs })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Final model, or the last good one when training diverged.
    pub model: MoEModel,
    pub history: MetricsHistory,
    /// Epoch at which a non-finite loss or weight appeared.
    pub diverged: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub nll: f64,
    pub transfers_per_layer: f64,
}

/// Mean NLL and hard-cache transfers per layer over `seqs`.
pub fn evaluate(model: &MoEModel, seqs: &[Sequence], gamma: f64, capacity: usize) -> Result<EvalSummary> {
    if seqs.is_empty() {
        return Ok(EvalSummary {
            nll: f64::NAN,
            transfers_per_layer: f64::NAN,
        });
    }
    let parts: Vec<(f64, f64)> = seqs
        .par_iter()
        .map(|s| {
            let (logits, trace) = model_forward(model, &s.tokens)?;
            let nll = nll_loss(&logits, &s.targets)?;
            let tx = hard_miss_count(&trace, gamma, capacity, &CacheInit::Uniform)?.transfers_per_layer();
            Ok((nll, tx))
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    Ok(EvalSummary {
        nll: parts.iter().map(|p| p.0).sum::<f64>() / n,
        transfers_per_layer: parts.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// Routing traces of `seqs` under `model`.
pub fn routing_traces(model: &MoEModel, seqs: &[Sequence]) -> Result<Vec<RoutingTrace>> {
    seqs.par_iter()
        .map(|s| model_forward(model, &s.tokens).map(|(_, t)| t))
        .collect()
}

fn trainable_params<'a>(model: &'a mut MoEModel, mask: &GradMask) -> Vec<&'a mut Matrix> {
    model
        .params_mut()
        .into_iter()
        .filter(|(k, _)| mask.contains(*k))
        .map(|(_, m)| m)
        .collect()
}

/// Fine-tunes a copy of `model`. The model passed in is the base whose
/// routing the rank-matching term preserves.
pub fn train(model: &MoEModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    model.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model: model.clone(),
            history: MetricsHistory::default(),
            diverged: None,
        });
    }
    cfg.validate()?;
    let w = &cfg.weights;
    crate::cache::check_capacity(w.c_sim, model.config.experts)?;

    let start = Instant::now();
    let opt_mask = cfg.trainable.mask();
    let grad_mask = cfg.grad_mask();
    let base_traces = if w.lambda_rm > 0.0 {
        Some(routing_traces(model, &data.train)?)
    } else {
        None
    };

    let mut model = model.clone();
    let mut lora = match cfg.lora_rank {
        Some(r) => Some(LoraSet::init(&model, r, &mut stream(cfg.seed, "lora"))?),
        None => None,
    };
    let mut sizes: Vec<usize> = trainable_params(&mut model, &opt_mask)
        .iter()
        .map(|m| m.data.len())
        .collect();
    if let Some(l) = &lora {
        sizes.extend(l.params().iter().map(|m| m.data.len()));
    }
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order_rng = stream(cfg.seed, "order");
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = MetricsHistory::default();
    let mut step = 0usize;

    let merged = |model: &MoEModel, lora: &Option<LoraSet>| -> Result<MoEModel> {
        match lora {
            Some(l) => l.merged(model),
            None => Ok(model.clone()),
        }
    };

    for epoch in 1..=cfg.epochs {
        let snapshot = (model.clone(), lora.clone());
        order.shuffle(&mut order_rng);
        let mut sums = LossComponents::default();
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sequence> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let base: Option<Vec<RoutingTrace>> = base_traces
                .as_ref()
                .map(|b| chunk.iter().map(|&i| b[i].clone()).collect());
            let eff = merged(&model, &lora)?;
            let (comps, report) = match backward(&eff, &batch, base.as_deref(), w, cfg.grad_mode, &grad_mask) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let frac = chunk.len() as f64 / n as f64;
            sums.nll += frac * comps.nll;
            sums.cs_hard += frac * comps.cs_hard;
            sums.rm += frac * comps.rm;

            let lr = lr_at(step, total_steps, cfg.learning_rate, cfg.warmup_ratio);
            step += 1;
            let lora_grads = match &lora {
                Some(l) => Some(l.grads(&report.grads)?),
                None => None,
            };
            let mut grads: Vec<&Matrix> = report
                .grads
                .params()
                .into_iter()
                .filter(|(k, _)| opt_mask.contains(*k))
                .map(|(_, m)| m)
                .collect();
            if let Some(g) = &lora_grads {
                grads.extend(g.params());
            }
            let mut params = trainable_params(&mut model, &opt_mask);
            if let Some(l) = &mut lora {
                params.extend(l.params_mut());
            }
            opt.step(params, grads, lr)?;
            let mut finite = true;
            model.visit_params(|_, _, m| finite &= m.is_finite());
            if let Some(l) = &lora {
                finite &= l.params().iter().all(|m| m.is_finite());
            }
            if !finite {
                diverged = true;
                break;
            }
        }
        if diverged {
            return Ok(TrainOutcome {
                model: merged(&snapshot.0, &snapshot.1)?,
                history,
                diverged: Some(epoch),
            });
        }
        let eff = merged(&model, &lora)?;
        let val = evaluate(&eff, &data.val, w.gamma, w.c_sim)?;
        history.epochs.push(EpochMetrics {
            epoch,
            l_nll: sums.nll,
            l_cs: sums.cs_hard,
            l_rm: sums.rm,
            transfers_per_layer: val.transfers_per_layer,
            val_nll: val.nll,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        model: merged(&model, &lora)?,
        history,
        diverged: None,
    })
}
