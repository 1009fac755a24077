use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{check_capacity, check_gamma, top_c, CacheInit, HardCacheState, MissReport};
use crate::error::{Error, Result};
use crate::model::RoutingTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvictionPolicy {
    Lru,
    Lfu,
    GammaCache { gamma: f64 },
}

impl EvictionPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            EvictionPolicy::Lru => "lru",
            EvictionPolicy::Lfu => "lfu",
            EvictionPolicy::GammaCache { .. } => "gamma_cache",
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match self {
            EvictionPolicy::GammaCache { gamma } => Some(*gamma),
            _ => None,
        }
    }
}

impl fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvictionPolicy::GammaCache { gamma } => write!(f, "gamma_cache({gamma})"),
            p => f.write_str(p.name()),
        }
    }
}

impl FromStr for EvictionPolicy {
    type Err = Error;

    /// Accepts `lru`, `lfu`, `gamma_cache(0.9)` or `gamma:0.9`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "lru" => return Ok(EvictionPolicy::Lru),
            "lfu" => return Ok(EvictionPolicy::Lfu),
            _ => {}
        }
        let arg = s
            .strip_prefix("gamma_cache(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("gamma:"));
        match arg.map(str::parse::<f64>) {
            Some(Ok(gamma)) => {
                check_gamma(gamma)?;
                Ok(EvictionPolicy::GammaCache { gamma })
            }
            _ => Err(Error::UnknownPolicy(s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepOutcome {
    pub misses: usize,
    pub evictions: usize,
}

/// Recency list: resident experts are the C most recently requested. Ties keep
/// resident experts, then the lower index.
#[derive(Debug, Clone, PartialEq)]
pub struct LruCache {
    last_used: Vec<i64>,
    resident: Vec<bool>,
    capacity: usize,
    clock: i64,
}

impl LruCache {
    fn new(experts: usize, capacity: usize, prefetch: Option<&[usize]>) -> Self {
        let mut resident = vec![false; experts];
        match prefetch {
            Some(set) => set.iter().for_each(|&i| resident[i] = true),
            None => resident[..capacity].iter_mut().for_each(|r| *r = true),
        }
        // Never-requested experts share the oldest timestamp.
        Self {
            last_used: vec![-1; experts],
            resident,
            capacity,
            clock: 0,
        }
    }

    fn step(&mut self, requests: &[usize]) -> StepOutcome {
        let misses = requests.iter().filter(|&&i| !self.resident[i]).count();
        for &i in requests {
            self.last_used[i] = self.clock;
        }
        self.clock += 1;
        let mut candidates: Vec<usize> = (0..self.resident.len())
            .filter(|&i| self.resident[i] || requests.contains(&i))
            .collect();
        candidates.sort_by(|&a, &b| {
            self.last_used[b]
                .cmp(&self.last_used[a])
                .then(self.resident[b].cmp(&self.resident[a]))
                .then(a.cmp(&b))
        });
        candidates.truncate(self.capacity);
        let mut next = vec![false; self.resident.len()];
        candidates.iter().for_each(|&i| next[i] = true);
        let evictions = self.resident.iter().zip(&next).filter(|(a, b)| **a && !**b).count();
        self.resident = next;
        StepOutcome { misses, evictions }
    }
}

/// Integer request counts; resident set is the Top-C by count.
#[derive(Debug, Clone, PartialEq)]
pub struct LfuCache {
    count: Vec<u64>,
    resident: Vec<bool>,
    capacity: usize,
}

impl LfuCache {
    fn new(experts: usize, capacity: usize, prefetch: Option<&[usize]>) -> Self {
        let mut count = vec![0u64; experts];
        if let Some(set) = prefetch {
            set.iter().for_each(|&i| count[i] = 1);
        }
        let mut cache = Self {
            count,
            resident: vec![false; experts],
            capacity,
        };
        cache.resident = cache.top();
        cache
    }

    fn top(&self) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..self.count.len()).collect();
        idx.sort_by(|&a, &b| {
            self.count[b]
                .cmp(&self.count[a])
                .then(self.resident[b].cmp(&self.resident[a]))
                .then(a.cmp(&b))
        });
        let mut res = vec![false; self.count.len()];
        idx[..self.capacity].iter().for_each(|&i| res[i] = true);
        res
    }

    fn step(&mut self, requests: &[usize]) -> StepOutcome {
        let misses = requests.iter().filter(|&&i| !self.resident[i]).count();
        for &i in requests {
            self.count[i] += 1;
        }
        let next = self.top();
        let evictions = self.resident.iter().zip(&next).filter(|(a, b)| **a && !**b).count();
        self.resident = next;
        StepOutcome { misses, evictions }
    }
}

/// One layer's expert cache under any supported policy.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerCache {
    Lru(LruCache),
    Lfu(LfuCache),
    Gamma(HardCacheState),
}

impl LayerCache {
    pub fn new(policy: EvictionPolicy, experts: usize, capacity: usize, prefetch: Option<&[usize]>) -> Result<Self> {
        check_capacity(capacity, experts)?;
        if let Some(set) = prefetch {
            crate::cache::check_set(set, experts, capacity)?;
        }
        Ok(match policy {
            EvictionPolicy::Lru => LayerCache::Lru(LruCache::new(experts, capacity, prefetch)),
            EvictionPolicy::Lfu => LayerCache::Lfu(LfuCache::new(experts, capacity, prefetch)),
            EvictionPolicy::GammaCache { gamma } => LayerCache::Gamma(match prefetch {
                Some(set) => HardCacheState::prefetch(experts, set, gamma)?,
                None => HardCacheState::uniform(experts, capacity, gamma)?,
            }),
        })
    }

    pub fn from_init(
        policy: EvictionPolicy,
        init: &CacheInit,
        layer: usize,
        experts: usize,
        capacity: usize,
    ) -> Result<Self> {
        if matches!(init, CacheInit::FillPhase) {
            return Err(Error::InvalidArgument(
                "fill-phase initialisation applies to the soft cache only".into(),
            ));
        }
        let set = init.prefetch_set(layer, experts, capacity)?;
        Self::new(policy, experts, capacity, set)
    }

    pub fn step(&mut self, requests: &[usize]) -> StepOutcome {
        match self {
            LayerCache::Lru(c) => c.step(requests),
            LayerCache::Lfu(c) => c.step(requests),
            LayerCache::Gamma(s) => {
                let (misses, evictions, next) = s.step_with_evictions(requests);
                *s = next;
                StepOutcome { misses, evictions }
            }
        }
    }

    pub fn resident(&self) -> Vec<usize> {
        let flags = match self {
            LayerCache::Lru(c) => &c.resident,
            LayerCache::Lfu(c) => &c.resident,
            LayerCache::Gamma(s) => &s.resident,
        };
        (0..flags.len()).filter(|&i| flags[i]).collect()
    }
}

/// Replays a trace layer by layer under `policy`.
pub fn run_eviction_policy(
    trace: &RoutingTrace,
    policy: EvictionPolicy,
    capacity: usize,
    init: &CacheInit,
) -> Result<MissReport> {
    check_capacity(capacity, trace.experts)?;
    init.check_layers(trace.layers)?;
    let mut report = MissReport::new(trace.layers);
    for l in 0..trace.layers {
        let mut cache = LayerCache::from_init(policy, init, l, trace.experts, capacity)?;
        for req in trace.layer_requests(l) {
            let out = cache.step(req);
            report.per_layer[l] += out.misses as u64;
            report.evictions_per_layer[l] += out.evictions as u64;
            report.requests += req.len() as u64;
        }
    }
    report.total = report.per_layer.iter().sum();
    Ok(report)
}

/// Top-C of arbitrary scores (used for pooled prefetch).
pub fn top_c_ids(scores: &[f64], capacity: usize) -> Result<Vec<usize>> {
    check_capacity(capacity, scores.len())?;
    let mut ids = top_c(scores, &vec![false; scores.len()], capacity);
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_policies() {
        assert_eq!("lru".parse::<EvictionPolicy>().unwrap(), EvictionPolicy::Lru);
        assert_eq!("LFU".parse::<EvictionPolicy>().unwrap(), EvictionPolicy::Lfu);
        assert_eq!(
            "gamma_cache(0.9)".parse::<EvictionPolicy>().unwrap(),
            EvictionPolicy::GammaCache { gamma: 0.9 }
        );
        assert_eq!(
            "gamma:0.5".parse::<EvictionPolicy>().unwrap(),
            EvictionPolicy::GammaCache { gamma: 0.5 }
        );
        assert!(matches!("fifo".parse::<EvictionPolicy>(), Err(Error::UnknownPolicy(_))));
        assert!("gamma:1.5".parse::<EvictionPolicy>().is_err());
        let p = EvictionPolicy::GammaCache { gamma: 0.3 };
        assert_eq!(p.to_string().parse::<EvictionPolicy>().unwrap(), p);
    }

    #[test]
    fn lru_cycle_misses_every_step() {
        // C+1 experts in a cycle with capacity C.
        let c = 3;
        let reqs: Vec<Vec<usize>> = (0..40).map(|t| vec![t % (c + 1)]).collect();
        let tr = RoutingTrace::from_requests(1, 40, 6, 1, reqs).unwrap();
        let init = CacheInit::Prefetch(vec![vec![3, 4, 5]]);
        let mut cache = LayerCache::from_init(EvictionPolicy::Lru, &init, 0, 6, c).unwrap();
        for (t, req) in tr.layer_requests(0).iter().enumerate() {
            let out = cache.step(req);
            if t > c {
                assert_eq!(out.misses, 1, "step {t}");
            }
        }
    }

    #[test]
    fn lru_keeps_most_recent() {
        let mut cache = LayerCache::new(EvictionPolicy::Lru, 6, 2, None).unwrap();
        assert_eq!(cache.resident(), vec![0, 1]);
        assert_eq!(cache.step(&[4]).misses, 1);
        assert_eq!(cache.resident(), vec![0, 4]);
        cache.step(&[5]);
        assert_eq!(cache.resident(), vec![4, 5]);
        assert_eq!(cache.step(&[4]).misses, 0);
        cache.step(&[2]);
        assert_eq!(cache.resident(), vec![2, 4]);
    }

    #[test]
    fn lfu_keeps_frequent() {
        let mut cache = LayerCache::new(EvictionPolicy::Lfu, 5, 2, None).unwrap();
        for _ in 0..3 {
            cache.step(&[3]);
        }
        cache.step(&[4]);
        cache.step(&[4]);
        cache.step(&[1]);
        assert_eq!(cache.resident(), vec![3, 4]);
    }

    #[test]
    fn capacity_checks() {
        assert!(LayerCache::new(EvictionPolicy::Lru, 4, 5, None).is_err());
        assert!(LayerCache::new(EvictionPolicy::Lru, 4, 2, Some(&[1])).is_err());
        assert!(LayerCache::new(EvictionPolicy::Lru, 4, 2, Some(&[1, 1])).is_err());
    }
}
