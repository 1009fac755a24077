//! Rank-matching loss, inversion counting and the combined objective.
//!
//! `rank_mistakes` sums a margin hinge `[ρ − (p_f,i − p_f,j)]₊` over every
//! ordered pair the base router strictly prefers (`p_b,i > p_b,j`). Pairs
//! tied in the base distribution impose no constraint. The sum is not
//! normalised by the pair count.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::RoutingTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cs: f64,
    pub lambda_rm: f64,
    /// Rank margin ρ.
    pub rho: f64,
    /// Soft-cache decay γ.
    pub gamma: f64,
    /// Simulated cache capacity used inside the loss.
    pub c_sim: usize,
}

impl LossWeights {
    /// Instruction-tuning defaults: λ_cs = 0.5, λ_rm = 0.1, γ = 0.9, ρ = 0.1.
    pub fn instruction_defaults(c_sim: usize) -> Self {
        Self {
            lambda_cs: 0.5,
            lambda_rm: 0.1,
            rho: 0.1,
            gamma: 0.9,
            c_sim,
        }
    }

    /// Math-reasoning defaults: λ_cs = 0.05, λ_rm = 0.01.
    pub fn reasoning_defaults(c_sim: usize) -> Self {
        Self {
            lambda_cs: 0.05,
            lambda_rm: 0.01,
            ..Self::instruction_defaults(c_sim)
        }
    }

    /// Plain next-token objective.
    pub fn nll_only(c_sim: usize) -> Self {
        Self {
            lambda_cs: 0.0,
            lambda_rm: 0.0,
            ..Self::instruction_defaults(c_sim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be > 0, got {}", self.rho)));
        }
        if self.lambda_cs < 0.0 || self.lambda_rm < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be nonnegative".into()));
        }
        crate::cache::check_gamma(self.gamma)?;
        if self.c_sim == 0 {
            return Err(Error::InvalidArgument("c_sim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Base and fine-tuned routing on the same inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedTrace {
    pub base: RoutingTrace,
    pub tuned: RoutingTrace,
}

impl PairedTrace {
    pub fn new(base: RoutingTrace, tuned: RoutingTrace) -> Result<Self> {
        if !base.same_shape(&tuned) {
            return Err(Error::InvalidArgument(format!(
                "paired traces differ in shape: base (L={}, T={}, E={}) vs tuned (L={}, T={}, E={})",
                base.layers, base.tokens, base.experts, tuned.layers, tuned.tokens, tuned.experts
            )));
        }
        Ok(Self { base, tuned })
    }
}

pub fn rank_mistakes(p_base: &[f64], p_tuned: &[f64], rho: f64) -> Result<f64> {
    if p_base.len() != p_tuned.len() {
        return Err(shape_err("rank_mistakes", p_base.len(), p_tuned.len()));
    }
    Ok(rank_mistakes_unchecked(p_base, p_tuned, rho))
}

pub(crate) fn rank_mistakes_unchecked(p_base: &[f64], p_tuned: &[f64], rho: f64) -> f64 {
    let mut m = 0.0;
    for (i, &bi) in p_base.iter().enumerate() {
        for (j, &bj) in p_base.iter().enumerate() {
            if bi > bj {
                m += (rho - (p_tuned[i] - p_tuned[j])).max(0.0);
            }
        }
    }
    m
}

/// Gradient of `rank_mistakes` w.r.t. the tuned probabilities, scaled by
/// `scale` and accumulated into `grad`.
pub(crate) fn rank_mistakes_grad(p_base: &[f64], p_tuned: &[f64], rho: f64, scale: f64, grad: &mut [f64]) {
    for (i, &bi) in p_base.iter().enumerate() {
        for (j, &bj) in p_base.iter().enumerate() {
            if bi > bj && rho - (p_tuned[i] - p_tuned[j]) > 0.0 {
                grad[i] -= scale;
                grad[j] += scale;
            }
        }
    }
}

/// Mean over all (layer, token) positions of every pair in the set.
pub fn rank_matching_loss(paired: &[PairedTrace], rho: f64) -> Result<f64> {
    if paired.is_empty() {
        return Err(Error::InvalidArgument("rank matching loss on an empty set".into()));
    }
    let mut total = 0.0;
    let mut positions = 0usize;
    for pair in paired {
        let (b, f) = (&pair.base, &pair.tuned);
        if !b.same_shape(f) {
            return Err(Error::InvalidArgument("paired trace shapes differ".into()));
        }
        for l in 0..b.layers {
            for t in 0..b.tokens {
                total += rank_mistakes_unchecked(b.probs(l, t), f.probs(l, t), rho);
                positions += 1;
            }
        }
    }
    if positions == 0 {
        return Ok(0.0);
    }
    Ok(total / positions as f64)
}

fn check_distinct(v: &[f64]) -> Result<()> {
    for i in 0..v.len() {
        for j in (i + 1)..v.len() {
            if v[i] == v[j] {
                return Err(Error::Tied(i, j));
            }
        }
    }
    Ok(())
}

/// Number of pairs ordered one way by `p` and the other way by `q`.
pub fn inversion_count(p: &[f64], q: &[f64]) -> Result<u64> {
    if p.len() != q.len() {
        return Err(shape_err("inversion_count", p.len(), q.len()));
    }
    check_distinct(p)?;
    check_distinct(q)?;
    let mut n = 0;
    for i in 0..p.len() {
        for j in 0..p.len() {
            if p[i] > p[j] && q[i] < q[j] {
                n += 1;
            }
        }
    }
    Ok(n)
}

/// Kendall rank correlation `1 − 2·Inv / (n choose 2)`.
pub fn kendall_tau(p: &[f64], q: &[f64]) -> Result<f64> {
    let inv = inversion_count(p, q)?;
    let n = p.len() as f64;
    let pairs = n * (n - 1.0) / 2.0;
    if pairs == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - 2.0 * inv as f64 / pairs)
}

/// `nll + λ_cs·lcs + λ_rm·lrm`
pub fn total_loss(nll: f64, lcs: f64, lrm: f64, w: &LossWeights) -> f64 {
    nll + w.lambda_cs * lcs + w.lambda_rm * lrm
}

/// KL(p_f ‖ p_b) averaged over positions. Diagnostic only.
pub fn router_kl(pair: &PairedTrace) -> f64 {
    let (b, f) = (&pair.base, &pair.tuned);
    let mut total = 0.0;
    for l in 0..b.layers {
        for t in 0..b.tokens {
            total += f
                .probs(l, t)
                .iter()
                .zip(b.probs(l, t))
                .filter(|(pf, _)| **pf > 0.0)
                .map(|(pf, pb)| pf * (pf / pb.max(f64::MIN_POSITIVE)).ln())
                .sum::<f64>();
        }
    }
    let n = (b.layers * b.tokens).max(1) as f64;
    total / n
}
