//! Expert-cache simulation.
//!
//! * [`soft`]: the differentiable, L1-normalised recency-weighted cache
//!   state and the cache-simulation loss built on it.
//! * [`hard`]: γ-discounted request counts with a Top-C resident set.
//! * [`policy`]: LRU, LFU and γ-cache behind one stepping interface, used by
//!   both trace replay and the offloaded-decode simulator.

pub mod hard;
pub mod policy;
pub mod soft;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use hard::{gamma_count_update, hard_miss_count, HardCacheState};
pub use policy::{run_eviction_policy, top_c_ids, EvictionPolicy, LayerCache, StepOutcome};
pub use soft::{lcs_closed_form, soft_cache_loss, soft_cache_schedule, SoftCacheState};

/// How a cache starts before the first token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheInit {
    /// Uniform counts with total mass C.
    Uniform,
    /// Soft cache only: start empty and grow until the mass reaches C.
    FillPhase,
    /// One set of exactly C expert ids per layer.
    Prefetch(Vec<Vec<usize>>),
}

impl CacheInit {
    /// The prefetch set for `layer`, validated against E and C.
    pub(crate) fn prefetch_set(&self, layer: usize, experts: usize, capacity: usize) -> Result<Option<&[usize]>> {
        match self {
            CacheInit::Prefetch(sets) => {
                let set = sets
                    .get(layer)
                    .ok_or_else(|| Error::InvalidArgument(format!("prefetch plan has no set for layer {layer}")))?;
                check_set(set, experts, capacity)?;
                Ok(Some(set.as_slice()))
            }
            _ => Ok(None),
        }
    }

    pub(crate) fn check_layers(&self, layers: usize) -> Result<()> {
        if let CacheInit::Prefetch(sets) = self {
            if sets.len() != layers {
                return Err(Error::InvalidArgument(format!(
                    "prefetch plan covers {} layers, expected {layers}",
                    sets.len()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_set(set: &[usize], experts: usize, capacity: usize) -> Result<()> {
    if set.len() != capacity {
        return Err(Error::InvalidArgument(format!(
            "prefetch set has {} experts, capacity is {capacity}",
            set.len()
        )));
    }
    let mut seen = vec![false; experts];
    for &i in set {
        if i >= experts || seen[i] {
            return Err(Error::InvalidArgument(format!(
                "prefetch set contains invalid or duplicate expert {i}"
            )));
        }
        seen[i] = true;
    }
    Ok(())
}

pub(crate) fn check_capacity(capacity: usize, experts: usize) -> Result<()> {
    if capacity == 0 || capacity > experts {
        return Err(Error::InvalidArgument(format!(
            "cache capacity must satisfy 1 <= C <= E (C={capacity}, E={experts})"
        )));
    }
    Ok(())
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "decay gamma must be in [0,1], got {gamma}"
        )));
    }
    Ok(())
}

/// Per-layer miss (transfer) counts for one simulated sequence or a batch.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MissReport {
    pub per_layer: Vec<u64>,
    pub total: u64,
    /// Experts leaving the resident set, counted separately from fetches.
    pub evictions_per_layer: Vec<u64>,
    /// Total expert requests seen, summed over layers.
    pub requests: u64,
}

impl MissReport {
    pub fn new(layers: usize) -> Self {
        Self {
            per_layer: vec![0; layers],
            total: 0,
            evictions_per_layer: vec![0; layers],
            requests: 0,
        }
    }

    pub fn transfers_per_layer(&self) -> f64 {
        if self.per_layer.is_empty() {
            0.0
        } else {
            self.total as f64 / self.per_layer.len() as f64
        }
    }

    pub fn hit_rate(&self) -> f64 {
        if self.requests == 0 {
            1.0
        } else {
            1.0 - self.total as f64 / self.requests as f64
        }
    }

    pub fn merge(&mut self, other: &MissReport) {
        if self.per_layer.len() < other.per_layer.len() {
            self.per_layer.resize(other.per_layer.len(), 0);
            self.evictions_per_layer.resize(other.per_layer.len(), 0);
        }
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            *a += b;
        }
        for (a, b) in self.evictions_per_layer.iter_mut().zip(&other.evictions_per_layer) {
            *a += b;
        }
        self.total += other.total;
        self.requests += other.requests;
    }
}

/// Indices of the C largest entries. Ties keep currently resident experts
/// first, then the lower index.
pub(crate) fn top_c(values: &[f64], resident: &[bool], capacity: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .total_cmp(&values[a])
            .then(resident[b].cmp(&resident[a]))
            .then(a.cmp(&b))
    });
    idx.truncate(capacity);
    idx
}
