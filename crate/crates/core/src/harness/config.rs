//! Experiment configuration: one JSON document with an explicit schema version.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::EvictionPolicy;
use crate::data::SyntheticDatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::offload::LatencyModel;
use crate::predictor::{EmbedConfig, PredictorHparams};
use crate::train::{GradMode, TrainConfig, TrainableSet};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchMode {
    None,
    Random,
    Predictor,
}

impl PrefetchMode {
    pub fn name(self) -> &'static str {
        match self {
            PrefetchMode::None => "none",
            PrefetchMode::Random => "random",
            PrefetchMode::Predictor => "predictor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hparams: PredictorHparams,
    pub embed: EmbedConfig,
    /// Tokens of each sequence used as the prompt.
    pub prompt_len: usize,
    /// Greedy steps averaged into the targets.
    pub gen_len: usize,
    /// Held-out prompts per topic used for decode simulation.
    pub eval_prompts_per_topic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub policy: EvictionPolicy,
    pub capacity: usize,
    /// Extra resident experts from low-precision storage; 1 means none.
    pub capacity_multiplier: f64,
    pub latency: LatencyModel,
    /// Replace the compute term with a measurement on the loaded model.
    pub calibrate_compute: bool,
    pub max_tokens: usize,
    pub prefetch: Vec<PrefetchMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambda_cs: Vec<f64>,
    pub lambda_rm: Vec<f64>,
    pub train_gamma: Vec<f64>,
    pub c_sim: Vec<usize>,
    /// `lru`, `lfu` or `gamma_cache`; the latter expands over `gamma`.
    pub policies: Vec<String>,
    pub gamma: Vec<f64>,
    pub capacity: Vec<usize>,
    pub prefetch: Vec<PrefetchMode>,
    /// Adds a λ_cs = λ_rm = 0 point when the grid lacks one.
    pub include_baseline: bool,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("lambda_cs", self.lambda_cs.is_empty()),
            ("lambda_rm", self.lambda_rm.is_empty()),
            ("train_gamma", self.train_gamma.is_empty()),
            ("c_sim", self.c_sim.is_empty()),
            ("policies", self.policies.is_empty()),
            ("capacity", self.capacity.is_empty()),
            ("prefetch", self.prefetch.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("sweep grid `{name}` is empty")));
        }
        for p in &self.policies {
            match p.as_str() {
                "lru" | "lfu" => {}
                "gamma_cache" if self.gamma.is_empty() => {
                    return Err(Error::Config(
                        "sweep grid `gamma` is empty but gamma_cache is listed".into(),
                    ))
                }
                "gamma_cache" => {}
                other => return Err(Error::UnknownPolicy(other.to_string())),
            }
        }
        Ok(())
    }

    /// Inference policies in grid order.
    pub fn eviction_policies(&self) -> Vec<EvictionPolicy> {
        let mut out = Vec::new();
        for p in &self.policies {
            match p.as_str() {
                "lru" => out.push(EvictionPolicy::Lru),
                "lfu" => out.push(EvictionPolicy::Lfu),
                _ => out.extend(self.gamma.iter().map(|&gamma| EvictionPolicy::GammaCache { gamma })),
            }
        }
        out
    }

    /// Training weights for every grid point, derived from `base`.
    pub fn train_points(&self, base: &LossWeights) -> Vec<LossWeights> {
        let mut out = Vec::new();
        if self.include_baseline && !self.has_baseline() {
            out.push(LossWeights {
                lambda_cs: 0.0,
                lambda_rm: 0.0,
                ..base.clone()
            });
        }
        for &lambda_cs in &self.lambda_cs {
            for &lambda_rm in &self.lambda_rm {
                for &gamma in &self.train_gamma {
                    for &c_sim in &self.c_sim {
                        out.push(LossWeights {
                            lambda_cs,
                            lambda_rm,
                            gamma,
                            c_sim,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }

    fn has_baseline(&self) -> bool {
        self.lambda_cs.contains(&0.0) && self.lambda_rm.contains(&0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub data: SyntheticDatasetSpec,
    pub model: ModelConfig,
    /// Full-parameter NLL training that produces the base model.
    pub pretrain: Option<TrainConfig>,
    pub train: TrainConfig,
    pub predictor: PredictorConfig,
    pub simulation: SimulationConfig,
    pub sweep: SweepGrid,
}

impl ExperimentConfig {
    /// Desk-scale setup on the two-topic task.
    pub fn desk(seed: u64) -> Self {
        let pretrain = TrainConfig {
            learning_rate: 3e-3,
            epochs: 20,
            trainable: TrainableSet::All,
            ..TrainConfig::toy(LossWeights::nll_only(4), seed)
        };
        let train = TrainConfig {
            learning_rate: 1.5e-2,
            epochs: 20,
            grad_mode: GradMode::SoftRoute,
            ..TrainConfig::toy(LossWeights::instruction_defaults(4), seed)
        };
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            data: SyntheticDatasetSpec::two_topic(seed),
            model: ModelConfig::toy(),
            pretrain: Some(pretrain),
            train,
            predictor: PredictorConfig {
                hparams: PredictorHparams::desk(seed),
                embed: EmbedConfig::default(),
                prompt_len: 8,
                gen_len: 16,
                eval_prompts_per_topic: 25,
            },
            simulation: SimulationConfig {
                policy: EvictionPolicy::Lfu,
                capacity: 4,
                capacity_multiplier: 1.0,
                latency: LatencyModel::default(),
                calibrate_compute: false,
                max_tokens: 16,
                prefetch: vec![PrefetchMode::None, PrefetchMode::Random, PrefetchMode::Predictor],
            },
            sweep: SweepGrid {
                lambda_cs: vec![0.0, 0.05, 0.5, 5.0],
                lambda_rm: vec![0.1],
                train_gamma: vec![0.9],
                c_sim: vec![4],
                policies: vec!["gamma_cache".into(), "lru".into(), "lfu".into()],
                gamma: vec![0.1, 0.3, 0.5, 0.7, 0.9],
                capacity: vec![4],
                prefetch: vec![PrefetchMode::None, PrefetchMode::Predictor],
                include_baseline: true,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Routes one root seed into every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        if let Some(p) = &mut self.pretrain {
            p.seed = seed;
        }
        self.predictor.hparams.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        self.model.validate()?;
        if self.data.vocab > self.model.vocab {
            return Err(Error::Config(format!(
                "dataset vocab {} exceeds model vocab {}",
                self.data.vocab, self.model.vocab
            )));
        }
        if self.data.seq_len > self.model.max_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_len {}",
                self.data.seq_len, self.model.max_len
            )));
        }
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        self.train.validate()?;
        self.predictor.hparams.validate()?;
        let pc = &self.predictor;
        if pc.prompt_len == 0 || pc.gen_len == 0 || pc.prompt_len > self.data.seq_len {
            return Err(Error::Config(
                "predictor needs 1 <= prompt_len <= seq_len and gen_len >= 1".into(),
            ));
        }
        let sim = &self.simulation;
        sim.latency.validate()?;
        if sim.capacity == 0 || sim.capacity > self.model.experts {
            return Err(Error::Config(format!(
                "simulation capacity {} must be in 1..=E",
                sim.capacity
            )));
        }
        if sim.prefetch.is_empty() {
            return Err(Error::Config("simulation `prefetch` list is empty".into()));
        }
        if let Some(&c) = self.sweep.capacity.iter().find(|&&c| c == 0 || c > self.model.experts) {
            return Err(Error::Config(format!("sweep capacity {c} must be in 1..=E")));
        }
        self.sweep.validate()
    }
}
