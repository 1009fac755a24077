//! Hard γ-cache: discounted counts `count' = γ·count + r`, resident set is
//! the Top-C of the counts. Ties keep resident experts, then the lower index.

use crate::cache::{check_capacity, check_gamma, top_c, CacheInit, MissReport};
use crate::error::{Error, Result};
use crate::model::RoutingTrace;

pub fn gamma_count_update(count: &[f64], r: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if count.len() != r.len() {
        return Err(crate::error::shape_err("gamma_count_update", count.len(), r.len()));
    }
    if let Some(i) = count.iter().position(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "count entry {i} is negative or non-finite"
        )));
    }
    if let Some(i) = r.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("request entry {i} is not binary")));
    }
    Ok(count.iter().zip(r).map(|(c, ri)| gamma * c + ri).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardCacheState {
    pub count: Vec<f64>,
    pub resident: Vec<bool>,
    pub gamma: f64,
    pub capacity: usize,
}

impl HardCacheState {
    pub fn from_counts(count: Vec<f64>, gamma: f64, capacity: usize) -> Result<Self> {
        check_capacity(capacity, count.len())?;
        check_gamma(gamma)?;
        let mut resident = vec![false; count.len()];
        for i in top_c(&count, &vec![false; count.len()], capacity) {
            resident[i] = true;
        }
        Ok(Self {
            count,
            resident,
            gamma,
            capacity,
        })
    }

    /// Uniform counts summing to C.
    pub fn uniform(experts: usize, capacity: usize, gamma: f64) -> Result<Self> {
        Self::from_counts(vec![capacity as f64 / experts as f64; experts], gamma, capacity)
    }

    /// Unit counts on the prefetched experts.
    pub fn prefetch(experts: usize, set: &[usize], gamma: f64) -> Result<Self> {
        crate::cache::check_set(set, experts, set.len())?;
        let mut count = vec![0.0; experts];
        set.iter().for_each(|&i| count[i] = 1.0);
        Self::from_counts(count, gamma, set.len())
    }

    pub fn from_init(init: &CacheInit, layer: usize, experts: usize, capacity: usize, gamma: f64) -> Result<Self> {
        match init {
            CacheInit::Uniform => Self::uniform(experts, capacity, gamma),
            CacheInit::Prefetch(_) => {
                let set = init.prefetch_set(layer, experts, capacity)?.unwrap_or_default();
                Self::prefetch(experts, set, gamma)
            }
            CacheInit::FillPhase => Err(Error::InvalidArgument(
                "fill-phase initialisation applies to the soft cache only".into(),
            )),
        }
    }

    pub fn resident_ids(&self) -> Vec<usize> {
        (0..self.resident.len()).filter(|&i| self.resident[i]).collect()
    }

    /// Serves `requests`, returning the miss count and the next state.
    pub fn step(&self, requests: &[usize]) -> (usize, HardCacheState) {
        let (misses, _, next) = self.step_with_evictions(requests);
        (misses, next)
    }

    pub(crate) fn step_with_evictions(&self, requests: &[usize]) -> (usize, usize, HardCacheState) {
        let misses = requests.iter().filter(|&&i| !self.resident[i]).count();
        let mut count: Vec<f64> = self.count.iter().map(|c| self.gamma * c).collect();
        for &i in requests {
            count[i] += 1.0;
        }
        let mut resident = vec![false; count.len()];
        for i in top_c(&count, &self.resident, self.capacity) {
            resident[i] = true;
        }
        let evictions = self
            .resident
            .iter()
            .zip(&resident)
            .filter(|(was, now)| **was && !**now)
            .count();
        (
            misses,
            evictions,
            HardCacheState {
                count,
                resident,
                gamma: self.gamma,
                capacity: self.capacity,
            },
        )
    }
}

/// Replays every layer of `trace` through an independent γ-cache.
pub fn hard_miss_count(trace: &RoutingTrace, gamma: f64, capacity: usize, init: &CacheInit) -> Result<MissReport> {
    check_capacity(capacity, trace.experts)?;
    init.check_layers(trace.layers)?;
    let mut report = MissReport::new(trace.layers);
    for l in 0..trace.layers {
        let mut state = HardCacheState::from_init(init, l, trace.experts, capacity, gamma)?;
        for req in trace.layer_requests(l) {
            let (m, ev, next) = state.step_with_evictions(req);
            report.per_layer[l] += m as u64;
            report.evictions_per_layer[l] += ev as u64;
            report.requests += req.len() as u64;
            state = next;
        }
    }
    report.total = report.per_layer.iter().sum();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_update_examples() {
        assert_eq!(
            gamma_count_update(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap(),
            vec![0.5, 1.0]
        );
        assert_eq!(
            gamma_count_update(&[3.0, 2.0], &[1.0, 0.0], 0.0).unwrap(),
            vec![1.0, 0.0]
        );
        let mut c = vec![0.5, 0.5, 0.5];
        let rs = [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 0.0, 0.0]];
        for r in &rs {
            c = gamma_count_update(&c, r, 1.0).unwrap();
        }
        assert_eq!(c, vec![2.5, 1.5, 2.5]);
        assert!(gamma_count_update(&[-1.0, 0.0], &[0.0, 1.0], 0.5).is_err());
        assert!(gamma_count_update(&[1.0, 0.0], &[0.5, 1.0], 0.5).is_err());
    }

    #[test]
    fn hit_costs_nothing() {
        let s = HardCacheState::prefetch(8, &[1, 3, 5], 0.9).unwrap();
        let (m, _) = s.step(&[3, 5]);
        assert_eq!(m, 0);
    }

    #[test]
    fn first_requests_become_resident() {
        let s = HardCacheState::uniform(16, 4, 0.9).unwrap();
        assert_eq!(s.resident_ids(), vec![0, 1, 2, 3]);
        let (m, s) = s.step(&[9, 12]);
        assert_eq!(m, 2);
        assert!(s.resident[9] && s.resident[12]);
        assert_eq!(s.resident_ids(), vec![0, 1, 9, 12]);
    }

    #[test]
    fn full_capacity_never_misses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reqs: Vec<Vec<usize>> = (0..40).map(|_| vec![rng.random_range(0..5)]).collect();
        let tr = RoutingTrace::from_requests(2, 20, 5, 1, reqs).unwrap();
        assert_eq!(hard_miss_count(&tr, 0.7, 5, &CacheInit::Uniform).unwrap().total, 0);
    }

    #[test]
    fn perfect_locality_with_prefetch() {
        let tr = RoutingTrace::from_requests(2, 30, 8, 2, vec![vec![2, 6]; 60]).unwrap();
        let plan = CacheInit::Prefetch(vec![vec![2, 6, 0], vec![6, 2, 7]]);
        assert_eq!(hard_miss_count(&tr, 0.9, 3, &plan).unwrap().total, 0);
        let bad = CacheInit::Prefetch(vec![vec![2, 6], vec![6, 2, 7]]);
        assert!(hard_miss_count(&tr, 0.9, 3, &bad).is_err());
    }

    #[test]
    fn lazy_update_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &gamma in &[0.0, 1e-6, 0.3, 0.9, 1.0] {
            let mut s = HardCacheState::uniform(12, 4, gamma).unwrap();
            for _ in 0..200 {
                let a = rng.random_range(0..12);
                let b = (a + rng.random_range(1..12)) % 12;
                let (_, next) = s.step(&[a, b]);
                for i in 0..12 {
                    if next.resident[i] {
                        assert!(s.resident[i] || i == a || i == b);
                    }
                }
                assert_eq!(next.resident.iter().filter(|&&x| x).count(), 4);
                s = next;
            }
        }
    }
}
