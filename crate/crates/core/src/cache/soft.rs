//! Soft cache state: `c' = (γ Γ c + r) / Γ'`, `Γ' = γ Γ + K/C`, which keeps
//! `‖c‖₁ = C` when every request vector has mass K.

use crate::cache::{check_capacity, check_gamma, CacheInit};
use crate::error::{Error, Result};
use crate::model::RoutingTrace;
use crate::tensor::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftCacheState {
    pub c: Vec<f64>,
    /// Normaliser Γ.
    pub norm: f64,
    pub gamma: f64,
    pub capacity: usize,
    pub top_k: usize,
    /// True while the unnormalised fill phase is still running.
    pub filling: bool,
}

impl SoftCacheState {
    pub fn uniform(experts: usize, capacity: usize, top_k: usize, gamma: f64) -> Result<Self> {
        check_capacity(capacity, experts)?;
        check_gamma(gamma)?;
        Ok(Self {
            c: vec![capacity as f64 / experts as f64; experts],
            norm: 1.0,
            gamma,
            capacity,
            top_k,
            filling: false,
        })
    }

    pub fn fill_phase(experts: usize, capacity: usize, top_k: usize, gamma: f64) -> Result<Self> {
        check_capacity(capacity, experts)?;
        check_gamma(gamma)?;
        Ok(Self {
            c: vec![0.0; experts],
            norm: 1.0,
            gamma,
            capacity,
            top_k,
            filling: true,
        })
    }

    pub fn prefetch(experts: usize, set: &[usize], top_k: usize, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        crate::cache::check_set(set, experts, set.len())?;
        check_capacity(set.len(), experts)?;
        let mut c = vec![0.0; experts];
        for &i in set {
            c[i] = 1.0;
        }
        Ok(Self {
            c,
            norm: 1.0,
            gamma,
            capacity: set.len(),
            top_k,
            filling: false,
        })
    }

    pub fn from_init(
        init: &CacheInit,
        layer: usize,
        experts: usize,
        capacity: usize,
        top_k: usize,
        gamma: f64,
    ) -> Result<Self> {
        match init {
            CacheInit::Uniform => Self::uniform(experts, capacity, top_k, gamma),
            CacheInit::FillPhase => Self::fill_phase(experts, capacity, top_k, gamma),
            CacheInit::Prefetch(_) => {
                let set = init.prefetch_set(layer, experts, capacity)?.unwrap_or_default();
                Self::prefetch(experts, set, top_k, gamma)
            }
        }
    }

    pub fn mass(&self) -> f64 {
        self.c.iter().sum()
    }

    /// One recursion step with request vector `r`.
    pub fn update(&self, r: &[f64]) -> Result<Self> {
        if r.len() != self.c.len() {
            return Err(crate::error::shape_err("soft_cache_update", self.c.len(), r.len()));
        }
        let mut next = self.clone();
        if self.filling {
            for (ci, &ri) in next.c.iter_mut().zip(r) {
                *ci = self.gamma * *ci + ri;
            }
            let mass = next.mass();
            let cap = self.capacity as f64;
            if mass >= cap {
                let s = cap / mass;
                next.c.iter_mut().for_each(|v| *v *= s);
                next.norm = 1.0;
                next.filling = false;
            }
            return Ok(next);
        }
        if !(self.norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "soft cache normaliser must be positive, got {}",
                self.norm
            )));
        }
        let new_norm = self.gamma * self.norm + self.top_k as f64 / self.capacity as f64;
        let keep = self.gamma * self.norm;
        for (ci, &ri) in next.c.iter_mut().zip(r) {
            *ci = (keep * *ci + ri) / new_norm;
        }
        next.norm = new_norm;
        Ok(next)
    }
}

/// Per-step affine coefficients of the soft cache: `c_{t+1} = a_t c_t + b_t r_t`,
/// valid whenever every request vector has mass K. Returned as `(a_t, b_t)` for
/// `t = 0..steps`.
pub fn soft_cache_schedule(
    gamma: f64,
    capacity: usize,
    top_k: usize,
    steps: usize,
    fill_phase: bool,
) -> Vec<(f64, f64)> {
    let cap = capacity as f64;
    let k = top_k as f64;
    let mut out = Vec::with_capacity(steps);
    let mut filling = fill_phase;
    let mut mass = if fill_phase { 0.0 } else { cap };
    let mut norm = 1.0;
    for _ in 0..steps {
        if filling {
            let next = gamma * mass + k;
            if next >= cap {
                let s = cap / next;
                out.push((gamma * s, s));
                filling = false;
                norm = 1.0;
                mass = cap;
            } else {
                out.push((gamma, 1.0));
                mass = next;
            }
        } else {
            let next = gamma * norm + k / cap;
            out.push((gamma * norm / next, 1.0 / next));
            norm = next;
        }
    }
    out
}

fn trace_params_ok(trace: &RoutingTrace, capacity: usize, gamma: f64) -> Result<()> {
    check_capacity(capacity, trace.experts)?;
    check_gamma(gamma)
}

/// Mean over (layer, token) of `⟨r, 1 − c⟩` using the soft cache.
pub fn soft_cache_loss(trace: &RoutingTrace, gamma: f64, capacity: usize, init: &CacheInit) -> Result<f64> {
    trace_params_ok(trace, capacity, gamma)?;
    init.check_layers(trace.layers)?;
    if trace.tokens == 0 || trace.layers == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for l in 0..trace.layers {
        let mut state = SoftCacheState::from_init(init, l, trace.experts, capacity, trace.top_k, gamma)?;
        for t in 0..trace.tokens {
            let r = trace.request_vector(l, t);
            total += r.iter().zip(&state.c).map(|(ri, ci)| ri * (1.0 - ci)).sum::<f64>();
            state = state.update(&r)?;
        }
    }
    Ok(total / (trace.layers * trace.tokens) as f64)
}

/// Closed-form expected cache-simulation loss over a set of traces, written in
/// terms of request inner products `φ(t,i) = E⟨r_t, r_i⟩` and `E⟨r_t, c_1⟩`.
/// Requires a normalised start (uniform or prefetch).
pub fn lcs_closed_form(traces: &[RoutingTrace], gamma: f64, capacity: usize, init: &CacheInit) -> Result<f64> {
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidArgument("closed form needs at least one trace".into()))?;
    if traces.iter().any(|t| !t.same_shape(first)) {
        return Err(Error::InvalidArgument("traces have heterogeneous shapes".into()));
    }
    if matches!(init, CacheInit::FillPhase) {
        return Err(Error::InvalidArgument(
            "closed form applies to normalised initialisations only".into(),
        ));
    }
    trace_params_ok(first, capacity, gamma)?;
    init.check_layers(first.layers)?;
    let (layers, tokens, experts, k) = (first.layers, first.tokens, first.experts, first.top_k);
    if tokens == 0 || layers == 0 {
        return Ok(0.0);
    }
    let n = traces.len() as f64;
    let kc = k as f64 / capacity as f64;
    let mut acc = 0.0;
    for l in 0..layers {
        let c1 = SoftCacheState::from_init(init, l, experts, capacity, k, gamma)?.c;
        let reqs: Vec<Vec<Vec<f64>>> = traces
            .iter()
            .map(|tr| (0..tokens).map(|t| tr.request_vector(l, t)).collect())
            .collect();
        // 1-based t as in the unrolled recursion.
        for t in 1..=tokens {
            let big_gamma = gamma.powi(t as i32 - 1) + kc * (1..t).map(|i| gamma.powi((t - 1 - i) as i32)).sum::<f64>();
            let mut inner = 0.0;
            for i in 1..t {
                let phi: f64 = reqs.iter().map(|r| dot(&r[t - 1], &r[i - 1])).sum::<f64>() / n;
                inner += gamma.powi((t - 1 - i) as i32) * phi;
            }
            let phi_init: f64 = reqs.iter().map(|r| dot(&r[t - 1], &c1)).sum::<f64>() / n;
            inner += gamma.powi(t as i32 - 1) * phi_init;
            acc += inner / big_gamma;
        }
    }
    Ok(k as f64 - acc / (layers * tokens) as f64)
}
