//! Synthetic latent-topic token streams.
//!
//! Each topic owns a disjoint block of the vocabulary with its own token
//! distribution and a cyclic successor map over that block. A sequence picks
//! one topic and walks a Markov chain: with probability `successor_prob` the
//! next token is the successor of the current one, with probability
//! `background` it is uniform over the whole vocabulary, otherwise it is drawn
//! from the topic distribution.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

const MIN_SUPPORT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_topics: usize,
    pub vocab: usize,
    pub seqs_per_topic: usize,
    /// Input length T; each sequence carries T+1 tokens.
    pub seq_len: usize,
    /// Peakedness of each topic's token distribution; 0 gives uniform.
    pub concentration: f64,
    pub successor_prob: f64,
    pub background: f64,
    /// Fraction of each topic's sequences held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn two_topic(seed: u64) -> Self {
        Self {
            n_topics: 2,
            vocab: 32,
            seqs_per_topic: 160,
            seq_len: 32,
            concentration: 2.0,
            successor_prob: 0.4,
            background: 0.05,
            val_fraction: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_topics == 0 {
            return Err(Error::InvalidArgument("n_topics must be >= 1".into()));
        }
        if self.vocab < self.n_topics * MIN_SUPPORT {
            return Err(Error::InvalidArgument(format!(
                "vocab {} too small for {} topics (need at least {} tokens each)",
                self.vocab, self.n_topics, MIN_SUPPORT
            )));
        }
        if self.seq_len == 0 || self.seqs_per_topic == 0 {
            return Err(Error::InvalidArgument("seq_len and seqs_per_topic must be >= 1".into()));
        }
        for (name, v) in [
            ("successor_prob", self.successor_prob),
            ("background", self.background),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0,1], got {v}")));
            }
        }
        if self.successor_prob + self.background > 1.0 {
            return Err(Error::InvalidArgument(
                "successor_prob + background must be <= 1".into(),
            ));
        }
        if !(self.concentration >= 0.0) {
            return Err(Error::InvalidArgument("concentration must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub topic: usize,
}

impl Sequence {
    /// Builds inputs/targets from a raw stream of T+1 tokens.
    pub fn from_stream(stream: &[usize], topic: usize) -> Self {
        Self {
            tokens: stream[..stream.len() - 1].to_vec(),
            targets: stream[1..].to_vec(),
            topic,
        }
    }

    pub fn prompt(&self, len: usize) -> &[usize] {
        &self.tokens[..len.min(self.tokens.len())]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub support: Vec<usize>,
    pub probs: Vec<f64>,
    /// successor[v] for v in support, indexed by vocabulary id.
    pub successor: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
    pub topics: Vec<Topic>,
}

pub fn generate_dataset(cfg: &SyntheticDatasetSpec) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "data");
    let mut vocab: Vec<usize> = (0..cfg.vocab).collect();
    vocab.shuffle(&mut rng);
    let block = cfg.vocab / cfg.n_topics;
    let mut topics = Vec::with_capacity(cfg.n_topics);
    for k in 0..cfg.n_topics {
        let end = if k + 1 == cfg.n_topics {
            cfg.vocab
        } else {
            (k + 1) * block
        };
        let mut support = vocab[k * block..end].to_vec();
        support.sort();
        let logits: Vec<f64> = support
            .iter()
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                cfg.concentration * z
            })
            .collect();
        let probs = crate::model::softmax_unchecked(&logits);
        let mut order = support.clone();
        order.shuffle(&mut rng);
        let mut successor = vec![None; cfg.vocab];
        for i in 0..order.len() {
            successor[order[i]] = Some(order[(i + 1) % order.len()]);
        }
        topics.push(Topic {
            support,
            probs,
            successor,
        });
    }

    let n_val = ((cfg.seqs_per_topic as f64) * cfg.val_fraction).round() as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (k, topic) in topics.iter().enumerate() {
        let dist = WeightedIndex::new(&topic.probs)
            .map_err(|e| Error::InvalidArgument(format!("topic {k} distribution: {e}")))?;
        for s in 0..cfg.seqs_per_topic {
            let raw = sample_stream(topic, &dist, cfg, &mut rng);
            let seq = Sequence::from_stream(&raw, k);
            if s < cfg.seqs_per_topic - n_val {
                train.push(seq);
            } else {
                val.push(seq);
            }
        }
    }
    Ok(Dataset { train, val, topics })
}

fn sample_stream<R: Rng>(
    topic: &Topic,
    dist: &WeightedIndex<f64>,
    cfg: &SyntheticDatasetSpec,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(cfg.seq_len + 1);
    out.push(topic.support[dist.sample(rng)]);
    while out.len() < cfg.seq_len + 1 {
        let cur = *out.last().unwrap();
        let u: f64 = rng.random();
        let next = if u < cfg.successor_prob {
            match topic.successor[cur] {
                Some(s) => s,
                None => topic.support[dist.sample(rng)],
            }
        } else if u < cfg.successor_prob + cfg.background {
            rng.random_range(0..cfg.vocab)
        } else {
            topic.support[dist.sample(rng)]
        };
        out.push(next);
    }
    out
}
