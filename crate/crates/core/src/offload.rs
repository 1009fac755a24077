//! Offloaded greedy decoding over a per-layer expert cache, with transfer
//! accounting and an affine latency estimate.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{top_c_ids, CacheInit, EvictionPolicy, LayerCache};
use crate::error::{Error, Result};
use crate::model::{forward_token, LayerOutput, MoEModel, RoutingTrace};
use crate::predictor::{argmax, PrefetchPlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub t_compute_per_token: f64,
    pub t_transfer_per_expert: f64,
    pub t_prefetch: f64,
}

impl Default for LatencyModel {
    /// 5.5 ms per expert transfer, 50 ms for a prefetch, and a 10 ms compute
    /// placeholder that [`LatencyModel::calibrated`] replaces with a measurement.
    fn default() -> Self {
        Self {
            t_compute_per_token: 0.01,
            t_transfer_per_expert: 5.5e-3,
            t_prefetch: 0.05,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_compute_per_token", self.t_compute_per_token),
            ("t_transfer_per_expert", self.t_transfer_per_expert),
            ("t_prefetch", self.t_prefetch),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Default constants with the compute term measured on `model`.
    pub fn calibrated(model: &MoEModel, tokens: usize) -> Result<Self> {
        let n = tokens.max(1);
        let start = Instant::now();
        for i in 0..n {
            forward_token(model, i % model.config.vocab)?;
        }
        Ok(Self {
            t_compute_per_token: start.elapsed().as_secs_f64() / n as f64,
            ..Self::default()
        })
    }
}

/// `tokens·t_compute + n_miss·t_transfer (+ t_prefetch when a plan was loaded)`.
pub fn latency_estimate(n_miss: u64, tokens: usize, lat: &LatencyModel, prefetched: bool) -> f64 {
    let pre = if prefetched { lat.t_prefetch } else { 0.0 };
    tokens as f64 * lat.t_compute_per_token + n_miss as f64 * lat.t_transfer_per_expert + pre
}

/// Effective capacity when weights are stored at reduced precision.
pub fn quantized_capacity(capacity: usize, multiplier: f64, experts: usize) -> Result<usize> {
    if !(multiplier >= 1.0) || !multiplier.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "capacity multiplier must be >= 1, got {multiplier}"
        )));
    }
    Ok(((capacity as f64 * multiplier).floor() as usize).min(experts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    pub generated: Vec<usize>,
    /// Host-to-device fetches per layer.
    pub misses_per_layer: Vec<u64>,
    pub evictions_per_layer: Vec<u64>,
    pub n_miss: u64,
    /// Expert requests served, summed over layers.
    pub requests: u64,
    pub estimated_seconds: f64,
    pub tokens_per_s: f64,
    pub hit_rate: f64,
}

impl DecodeReport {
    fn empty(layers: usize) -> Self {
        Self {
            generated: Vec::new(),
            misses_per_layer: vec![0; layers],
            evictions_per_layer: vec![0; layers],
            n_miss: 0,
            requests: 0,
            estimated_seconds: 0.0,
            tokens_per_s: 0.0,
            hit_rate: 1.0,
        }
    }

    pub fn transfers_per_layer(&self) -> f64 {
        if self.misses_per_layer.is_empty() {
            0.0
        } else {
            self.n_miss as f64 / self.misses_per_layer.len() as f64
        }
    }

    fn finish(&mut self, lat: &LatencyModel, prefetched: bool) {
        self.n_miss = self.misses_per_layer.iter().sum();
        self.estimated_seconds = latency_estimate(self.n_miss, self.generated.len(), lat, prefetched);
        self.tokens_per_s = if self.estimated_seconds > 0.0 {
            self.generated.len() as f64 / self.estimated_seconds
        } else {
            0.0
        };
        self.hit_rate = if self.requests == 0 {
            1.0
        } else {
            1.0 - self.n_miss as f64 / self.requests as f64
        };
    }
}

fn check_prompt(model: &MoEModel, prompt: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t >= model.config.vocab) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab: model.config.vocab,
        });
    }
    Ok(())
}

fn layer_caches(
    model: &MoEModel,
    policy: EvictionPolicy,
    capacity: usize,
    init: &CacheInit,
) -> Result<Vec<LayerCache>> {
    let c = &model.config;
    init.check_layers(c.layers)?;
    (0..c.layers)
        .map(|l| LayerCache::from_init(policy, init, l, c.experts, capacity))
        .collect()
}

/// Per-sequence decode state: tokens still to feed and the routing so far.
struct Stream<'a> {
    prompt: &'a [usize],
    fed: usize,
    generated: Vec<usize>,
    max_tokens: usize,
    probs: Vec<Vec<Vec<f64>>>,
    requests: Vec<Vec<Vec<usize>>>,
}

impl<'a> Stream<'a> {
    fn new(prompt: &'a [usize], layers: usize, max_tokens: usize) -> Self {
        Self {
            prompt,
            fed: 0,
            generated: Vec::new(),
            max_tokens,
            probs: vec![Vec::new(); layers],
            requests: vec![Vec::new(); layers],
        }
    }

    /// Prefill plus `max_tokens − 1` fed-back tokens; the last generated token
    /// is never fed.
    fn next_input(&self) -> Option<usize> {
        if self.max_tokens == 0 || self.generated.len() == self.max_tokens {
            return None;
        }
        if self.fed < self.prompt.len() {
            Some(self.prompt[self.fed])
        } else {
            self.generated.last().copied()
        }
    }

    fn advance(&mut self, model: &MoEModel) -> Result<Option<Vec<LayerOutput>>> {
        let Some(tok) = self.next_input() else {
            return Ok(None);
        };
        let (logits, outs) = forward_token(model, tok)?;
        self.fed += 1;
        if self.fed >= self.prompt.len() {
            self.generated.push(argmax(&logits));
        }
        for (l, o) in outs.iter().enumerate() {
            self.probs[l].push(o.probs.clone());
            self.requests[l].push(o.requests.clone());
        }
        Ok(Some(outs))
    }

    fn trace(&self, model: &MoEModel) -> Result<RoutingTrace> {
        let c = &model.config;
        let t = self.requests.first().map_or(0, |r| r.len());
        let probs = self.probs.iter().flatten().flatten().copied().collect();
        let requests = self.requests.iter().flatten().cloned().collect();
        RoutingTrace::new(c.layers, t, c.experts, c.top_k, probs, requests)
    }
}

/// Greedy decode of `max_tokens` tokens with offloaded experts. Prefill
/// tokens are charged like decode tokens. Returns the report and the routing
/// trace of every fed token.
pub fn simulate_decode(
    model: &MoEModel,
    prompt: &[usize],
    policy: EvictionPolicy,
    capacity: usize,
    prefetch: Option<&PrefetchPlan>,
    lat: &LatencyModel,
    max_tokens: usize,
) -> Result<(DecodeReport, RoutingTrace)> {
    let (report, mut traces) =
        simulate_batch_decode(model, &[prompt.to_vec()], policy, capacity, prefetch, lat, max_tokens)?;
    Ok((report, traces.pop().expect("one trace per prompt")))
}

/// Lockstep decode of a batch sharing one cache per layer. Each step's
/// requests are the union over sequences still running.
pub fn simulate_batch_decode(
    model: &MoEModel,
    prompts: &[Vec<usize>],
    policy: EvictionPolicy,
    capacity: usize,
    prefetch: Option<&PrefetchPlan>,
    lat: &LatencyModel,
    max_tokens: usize,
) -> Result<(DecodeReport, Vec<RoutingTrace>)> {
    model.config.validate()?;
    lat.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("batch must contain at least one prompt".into()));
    }
    for p in prompts {
        check_prompt(model, p)?;
    }
    let c = &model.config;
    let init = prefetch.map_or(CacheInit::Uniform, |p| p.to_init());
    let mut caches = layer_caches(model, policy, capacity, &init)?;
    let mut report = DecodeReport::empty(c.layers);
    let mut streams: Vec<Stream> = prompts.iter().map(|p| Stream::new(p, c.layers, max_tokens)).collect();
    loop {
        let mut union: Vec<Vec<usize>> = vec![Vec::new(); c.layers];
        let mut active = false;
        for s in &mut streams {
            if let Some(outs) = s.advance(model)? {
                active = true;
                for (u, o) in union.iter_mut().zip(&outs) {
                    u.extend_from_slice(&o.requests);
                }
            }
        }
        if !active {
            break;
        }
        for (l, (cache, mut req)) in caches.iter_mut().zip(union).enumerate() {
            req.sort_unstable();
            req.dedup();
            let out = cache.step(&req);
            report.misses_per_layer[l] += out.misses as u64;
            report.evictions_per_layer[l] += out.evictions as u64;
            report.requests += req.len() as u64;
        }
    }
    let traces = streams.iter().map(|s| s.trace(model)).collect::<Result<Vec<_>>>()?;
    report.generated = streams.into_iter().flat_map(|s| s.generated).collect();
    report.finish(lat, prefetch.is_some() && max_tokens > 0);
    Ok((report, traces))
}

/// Per-layer Top-C of predicted scores summed over the batch.
pub fn pooled_prefetch(scores: &[Vec<Vec<f64>>], capacity: usize) -> Result<PrefetchPlan> {
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("no predictions to pool".into()))?;
    let mut sum: Vec<Vec<f64>> = first.iter().map(|r| vec![0.0; r.len()]).collect();
    for s in scores {
        if s.len() != sum.len() || s.iter().zip(&sum).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::InvalidArgument(
                "heterogeneous prediction shapes in batch".into(),
            ));
        }
        for (acc, row) in sum.iter_mut().zip(s) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    }
    let sets = sum.iter().map(|r| top_c_ids(r, capacity)).collect::<Result<_>>()?;
    Ok(PrefetchPlan { sets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::run_eviction_policy;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> MoEModel {
        let cfg = ModelConfig {
            layers: 3,
            experts: 8,
            hidden: 8,
            ffn: 8,
            vocab: 12,
            ..ModelConfig::toy()
        };
        MoEModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    const GAMMA: EvictionPolicy = EvictionPolicy::GammaCache { gamma: 0.9 };

    #[test]
    fn latency_is_affine() {
        let lat = LatencyModel::default();
        assert_eq!(latency_estimate(0, 10, &lat, false), 10.0 * lat.t_compute_per_token);
        let one = latency_estimate(7, 10, &lat, true);
        let two = latency_estimate(14, 10, &lat, true);
        assert!((two - one - 7.0 * lat.t_transfer_per_expert).abs() < 1e-15);
        let stall = latency_estimate(100, 0, &lat, false);
        assert!((stall - 0.55).abs() < 1e-12);
    }

    #[test]
    fn fully_resident_has_no_misses() {
        let m = model(1);
        let lat = LatencyModel::default();
        let plan = PrefetchPlan {
            sets: vec![(0..8).collect(); 3],
        };
        for policy in [GAMMA, EvictionPolicy::Lru, EvictionPolicy::Lfu] {
            let (r, _) = simulate_decode(&m, &[1, 2, 3], policy, 8, Some(&plan), &lat, 6).unwrap();
            assert_eq!(r.n_miss, 0);
            assert_eq!(r.generated.len(), 6);
            let want = 6.0 * lat.t_compute_per_token + lat.t_prefetch;
            assert!((r.estimated_seconds - want).abs() < 1e-15);
            assert_eq!(r.hit_rate, 1.0);
        }
    }

    #[test]
    fn zero_tokens_is_empty() {
        let m = model(2);
        let (r, t) = simulate_decode(&m, &[1, 2], GAMMA, 4, None, &LatencyModel::default(), 0).unwrap();
        assert_eq!((r.n_miss, r.generated.len(), t.tokens), (0, 0, 0));
        assert_eq!(r.estimated_seconds, 0.0);
    }

    #[test]
    fn replay_matches_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let m = model(seed);
            let plan = PrefetchPlan::random(3, 8, 4, &mut rng).unwrap();
            for policy in [GAMMA, EvictionPolicy::Lru, EvictionPolicy::Lfu] {
                for pf in [None, Some(&plan)] {
                    let (r, trace) =
                        simulate_decode(&m, &[seed as usize % 12, 5], policy, 4, pf, &LatencyModel::default(), 9)
                            .unwrap();
                    assert_eq!(trace.tokens, 2 + 9 - 1);
                    let init = pf.map_or(CacheInit::Uniform, |p| p.to_init());
                    let replay = run_eviction_policy(&trace, policy, 4, &init).unwrap();
                    assert_eq!(replay.per_layer, r.misses_per_layer);
                    assert_eq!(replay.evictions_per_layer, r.evictions_per_layer);
                }
            }
        }
    }

    #[test]
    fn batch_reductions() {
        let m = model(4);
        let lat = LatencyModel::default();
        let (single, _) = simulate_decode(&m, &[3, 7], GAMMA, 4, None, &lat, 5).unwrap();
        let (one, _) = simulate_batch_decode(&m, &[vec![3, 7]], GAMMA, 4, None, &lat, 5).unwrap();
        assert_eq!(single, one);
        let (same, _) =
            simulate_batch_decode(&m, &[vec![3, 7], vec![3, 7], vec![3, 7]], GAMMA, 4, None, &lat, 5).unwrap();
        assert_eq!(same.misses_per_layer, single.misses_per_layer);
    }

    #[test]
    fn diverse_batch_costs_at_least_each_member() {
        let m = model(5);
        let lat = LatencyModel::default();
        let prompts = vec![vec![0, 1], vec![6, 11], vec![9]];
        let (batch, _) = simulate_batch_decode(&m, &prompts, EvictionPolicy::Lfu, 2, None, &lat, 6).unwrap();
        for p in &prompts {
            let (r, _) = simulate_decode(&m, p, EvictionPolicy::Lfu, 2, None, &lat, 6).unwrap();
            assert!(batch.n_miss >= r.n_miss, "{} < {}", batch.n_miss, r.n_miss);
        }
    }

    #[test]
    fn pooled_plan_sums_scores() {
        let a = vec![vec![0.5, 0.3, 0.2]];
        let b = vec![vec![0.0, 0.3, 0.7]];
        assert_eq!(pooled_prefetch(&[a.clone(), b], 1).unwrap().sets, vec![vec![2]]);
        assert!(pooled_prefetch(&[a, vec![vec![1.0]]], 1).is_err());
        assert!(pooled_prefetch(&[], 1).is_err());
    }

    #[test]
    fn errors() {
        let m = model(6);
        let lat = LatencyModel::default();
        assert!(simulate_decode(&m, &[], GAMMA, 4, None, &lat, 3).is_err());
        assert!(simulate_decode(&m, &[40], GAMMA, 4, None, &lat, 3).is_err());
        assert!(simulate_decode(&m, &[1], GAMMA, 9, None, &lat, 3).is_err());
        let short = PrefetchPlan {
            sets: vec![vec![0, 1]; 3],
        };
        assert!(simulate_decode(&m, &[1], GAMMA, 4, Some(&short), &lat, 3).is_err());
        let bad = LatencyModel {
            t_prefetch: -1.0,
            ..lat
        };
        assert!(simulate_decode(&m, &[1], GAMMA, 4, None, &bad, 3).is_err());
        assert_eq!(quantized_capacity(8, 3.0, 16).unwrap(), 16);
        assert_eq!(quantized_capacity(2, 1.5, 16).unwrap(), 3);
        assert!(quantized_capacity(2, 0.5, 16).is_err());
    }
}
