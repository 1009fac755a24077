//! Reverse-mode gradients of `nll + λ_cs·L_cs + λ_rm·L_rm` for the toy model.
//!
//! With a normalised start the soft cache is affine in the request vectors,
//! `c_{t+1} = a_t c_t + b_t r_t`, and the coefficients do not depend on the
//! data. So `∂L_cs/∂r_i = (1 − c_i) − Σ_{t>i} w(t,i) r_t` with
//! `w(t,i) = b_i Π_{j=i+1}^{t-1} a_j`. The sum is truncated at
//! [`CACHE_BPTT_WINDOW`] steps.

use serde::{Deserialize, Serialize};

use crate::cache::{soft_cache_schedule, CacheInit, SoftCacheState};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::losses::{rank_matching_loss, rank_mistakes_grad, rank_mistakes_unchecked, LossWeights, PairedTrace};
use crate::model::{
    log_sum_exp, model_forward, nll_loss, softmax, top_k_unchecked, MoEModel, ParamKind, RoutingMode, RoutingTrace,
};
use crate::tensor::dot;

/// Older cache contributions are treated as constants in the backward pass.
pub const CACHE_BPTT_WINDOW: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// `r` is replaced by `K·p` inside the cache loss.
    #[default]
    SoftRoute,
    /// Binary `r` forward, its gradient passed to `p` unchanged.
    StraightThrough,
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradMask {
    pub embed: bool,
    pub router: bool,
    pub gate: bool,
    pub up: bool,
    pub down: bool,
    pub head: bool,
}

impl GradMask {
    pub fn all() -> Self {
        Self {
            embed: true,
            router: true,
            gate: true,
            up: true,
            down: true,
            head: true,
        }
    }

    pub fn router_gate() -> Self {
        Self {
            router: true,
            gate: true,
            ..Self::default()
        }
    }

    pub fn contains(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Embed => self.embed,
            ParamKind::Router => self.router,
            ParamKind::Gate => self.gate,
            ParamKind::Up => self.up,
            ParamKind::Down => self.down,
            ParamKind::Head => self.head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub nll: f64,
    /// Cache loss as optimised (surrogate in soft-route mode).
    pub cs: f64,
    /// Cache loss with binary requests.
    pub cs_hard: f64,
    pub rm: f64,
    pub total: f64,
}

impl LossComponents {
    fn add_scaled(&mut self, o: &LossComponents, s: f64) {
        self.nll += s * o.nll;
        self.cs += s * o.cs;
        self.cs_hard += s * o.cs_hard;
        self.rm += s * o.rm;
        self.total += s * o.total;
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [("l_nll", self.nll), ("l_cs", self.cs), ("l_rm", self.rm)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// Same layout as the model; frozen groups are zero.
    pub grads: MoEModel,
    pub norm: f64,
}

struct ExpertCache {
    idx: usize,
    g: Vec<f64>,
    u: Vec<f64>,
    m: Vec<f64>,
    o: Vec<f64>,
}

struct LayerCache {
    h: Vec<f64>,
    p: Vec<f64>,
    requests: Vec<usize>,
    experts: Vec<ExpertCache>,
}

struct TokenCache {
    layers: Vec<LayerCache>,
    h_out: Vec<f64>,
}

fn forward_cached(model: &MoEModel, token: usize) -> Result<TokenCache> {
    let c = &model.config;
    if token >= c.vocab {
        return Err(Error::TokenOutOfRange {
            id: token,
            vocab: c.vocab,
        });
    }
    let mut h = model.embed.row(token).to_vec();
    let mut layers = Vec::with_capacity(c.layers);
    for layer in &model.layers {
        let p = softmax(&layer.router.matvec(&h)).map_err(|_| Error::NonFinite("router logits".into()))?;
        let requests = top_k_unchecked(&p, c.top_k);
        let active: Vec<usize> = match c.routing_mode {
            RoutingMode::Hard => requests.clone(),
            RoutingMode::Soft => (0..c.experts).collect(),
        };
        let mut y = vec![0.0; h.len()];
        let mut experts = Vec::with_capacity(active.len());
        for &i in &active {
            let e = &layer.experts[i];
            let g = e.gate.matvec(&h);
            let u = e.up.matvec(&h);
            let m: Vec<f64> = g.iter().zip(&u).map(|(&gi, &ui)| c.activation.apply(gi) * ui).collect();
            let o = e.down.matvec(&m);
            for (yj, oj) in y.iter_mut().zip(&o) {
                *yj += p[i] * oj;
            }
            experts.push(ExpertCache { idx: i, g, u, m, o });
        }
        let h_in = h.clone();
        for (hj, yj) in h.iter_mut().zip(&y) {
            *hj += yj;
        }
        layers.push(LayerCache {
            h: h_in,
            p,
            requests,
            experts,
        });
    }
    Ok(TokenCache { layers, h_out: h })
}

fn binary(requests: &[usize], experts: usize) -> Vec<f64> {
    let mut r = vec![0.0; experts];
    requests.iter().for_each(|&i| r[i] = 1.0);
    r
}

/// Cache loss of one layer's request stream and its gradient w.r.t. each `r_t`.
fn cache_loss_grad(rs: &[Vec<f64>], gamma: f64, capacity: usize, top_k: usize) -> (f64, Vec<Vec<f64>>) {
    let t_len = rs.len();
    let e = rs[0].len();
    let sched = soft_cache_schedule(gamma, capacity, top_k, t_len, false);
    let mut c = vec![capacity as f64 / e as f64; e];
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(t_len);
    for (t, r) in rs.iter().enumerate() {
        loss += r.iter().zip(&c).map(|(ri, ci)| ri * (1.0 - ci)).sum::<f64>();
        grads.push(c.iter().map(|ci| 1.0 - ci).collect::<Vec<f64>>());
        let (a, b) = sched[t];
        for (ci, ri) in c.iter_mut().zip(r) {
            *ci = a * *ci + b * ri;
        }
    }
    for i in 0..t_len {
        let mut w = sched[i].1;
        let end = t_len.min(i + 1 + CACHE_BPTT_WINDOW);
        for t in (i + 1)..end {
            for (gi, rt) in grads[i].iter_mut().zip(&rs[t]) {
                *gi -= w * rt;
            }
            w *= sched[t].0;
        }
    }
    (loss, grads)
}

/// Hard-request cache loss of one layer (no gradient).
fn cache_loss_value(rs: &[Vec<f64>], gamma: f64, capacity: usize, top_k: usize) -> f64 {
    let sched = soft_cache_schedule(gamma, capacity, top_k, rs.len(), false);
    let e = rs[0].len();
    let mut c = vec![capacity as f64 / e as f64; e];
    let mut loss = 0.0;
    for (t, r) in rs.iter().enumerate() {
        loss += r.iter().zip(&c).map(|(ri, ci)| ri * (1.0 - ci)).sum::<f64>();
        let (a, b) = sched[t];
        for (ci, ri) in c.iter_mut().zip(r) {
            *ci = a * *ci + b * ri;
        }
    }
    loss
}

/// Loss of one sequence; gradients scaled by `scale` are added into `grads`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sequence_grad(
    model: &MoEModel,
    seq: &Sequence,
    base: Option<&RoutingTrace>,
    w: &LossWeights,
    mode: GradMode,
    mask: &GradMask,
    scale: f64,
    grads: &mut MoEModel,
) -> Result<LossComponents> {
    let cfg = &model.config;
    let t_len = seq.tokens.len();
    if t_len == 0 || seq.targets.len() != t_len {
        return Err(Error::InvalidArgument(
            "sequence must be non-empty with one target per token".into(),
        ));
    }
    if t_len > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {t_len} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let (n_layers, n_exp, k) = (cfg.layers, cfg.experts, cfg.top_k);
    let use_rm = w.lambda_rm > 0.0;
    if use_rm {
        match base {
            Some(b) if b.layers == n_layers && b.tokens == t_len && b.experts == n_exp => {}
            Some(_) => {
                return Err(Error::InvalidArgument(
                    "base trace shape does not match sequence".into(),
                ))
            }
            None => return Err(Error::InvalidArgument("rank matching needs base-model traces".into())),
        }
    }

    let caches: Vec<TokenCache> = seq
        .tokens
        .iter()
        .map(|&tok| forward_cached(model, tok))
        .collect::<Result<_>>()?;

    // dL/dp for every (layer, token), already scaled.
    let lt = (n_layers * t_len) as f64;
    let mut dp = vec![vec![vec![0.0; n_exp]; t_len]; n_layers];
    let mut out = LossComponents::default();
    for l in 0..n_layers {
        let hard: Vec<Vec<f64>> = caches.iter().map(|c| binary(&c.layers[l].requests, n_exp)).collect();
        out.cs_hard += cache_loss_value(&hard, w.gamma, w.c_sim, k) / lt;
        let rs = match mode {
            GradMode::SoftRoute => caches
                .iter()
                .map(|c| c.layers[l].p.iter().map(|pi| k as f64 * pi).collect())
                .collect(),
            GradMode::StraightThrough => hard,
        };
        let (cs, dr) = cache_loss_grad(&rs, w.gamma, w.c_sim, k);
        out.cs += cs / lt;
        if w.lambda_cs > 0.0 {
            let s = match mode {
                GradMode::SoftRoute => k as f64,
                GradMode::StraightThrough => 1.0,
            } * scale
                * w.lambda_cs
                / lt;
            for t in 0..t_len {
                for (d, g) in dp[l][t].iter_mut().zip(&dr[t]) {
                    *d += s * g;
                }
            }
        }
        if let Some(b) = base {
            if b.layers == n_layers && b.tokens == t_len {
                for t in 0..t_len {
                    let pf = &caches[t].layers[l].p;
                    out.rm += rank_mistakes_unchecked(b.probs(l, t), pf, w.rho) / lt;
                    if use_rm {
                        rank_mistakes_grad(b.probs(l, t), pf, w.rho, scale * w.lambda_rm / lt, &mut dp[l][t]);
                    }
                }
            }
        }
    }

    for (t, cache) in caches.iter().enumerate() {
        let target = seq.targets[t];
        if target >= cfg.vocab {
            return Err(Error::TokenOutOfRange {
                id: target,
                vocab: cfg.vocab,
            });
        }
        let logits = model.head.matvec(&cache.h_out);
        let lse = log_sum_exp(&logits);
        out.nll += (lse - logits[target]) / t_len as f64;

        let mut dh = vec![0.0; cfg.hidden];
        for (v, &z) in logits.iter().enumerate() {
            let mut dl = (z - lse).exp();
            if v == target {
                dl -= 1.0;
            }
            dl *= scale / t_len as f64;
            if mask.head {
                for (gj, hj) in grads.head.row_mut(v).iter_mut().zip(&cache.h_out) {
                    *gj += dl * hj;
                }
            }
            for (dj, wj) in dh.iter_mut().zip(model.head.row(v)) {
                *dj += dl * wj;
            }
        }

        for l in (0..n_layers).rev() {
            let lc = &cache.layers[l];
            let layer = &model.layers[l];
            let glayer = &mut grads.layers[l];
            let mut dpl = dp[l][t].clone();
            let mut dx = dh.clone();
            for ec in &lc.experts {
                let e = &layer.experts[ec.idx];
                let ge = &mut glayer.experts[ec.idx];
                dpl[ec.idx] += dot(&dh, &ec.o);
                let d_o: Vec<f64> = dh.iter().map(|v| lc.p[ec.idx] * v).collect();
                if mask.down {
                    ge.down.add_outer(&d_o, &ec.m, 1.0);
                }
                let mut dm = vec![0.0; ec.m.len()];
                e.down.matvec_t_acc(&d_o, &mut dm);
                let act = cfg.activation;
                let dg: Vec<f64> = (0..dm.len())
                    .map(|j| dm[j] * ec.u[j] * act.derivative(ec.g[j]))
                    .collect();
                let du: Vec<f64> = (0..dm.len()).map(|j| dm[j] * act.apply(ec.g[j])).collect();
                if mask.gate {
                    ge.gate.add_outer(&dg, &lc.h, 1.0);
                }
                if mask.up {
                    ge.up.add_outer(&du, &lc.h, 1.0);
                }
                e.gate.matvec_t_acc(&dg, &mut dx);
                e.up.matvec_t_acc(&du, &mut dx);
            }
            let s = dot(&dpl, &lc.p);
            let dz: Vec<f64> = lc.p.iter().zip(&dpl).map(|(pi, di)| pi * (di - s)).collect();
            if mask.router {
                glayer.router.add_outer(&dz, &lc.h, 1.0);
            }
            layer.router.matvec_t_acc(&dz, &mut dx);
            dh = dx;
        }
        if mask.embed {
            for (gj, dj) in grads.embed.row_mut(seq.tokens[t]).iter_mut().zip(&dh) {
                *gj += dj;
            }
        }
    }
    out.total = out.nll + w.lambda_cs * out.cs + w.lambda_rm * out.rm;
    out.check_finite()?;
    Ok(out)
}

pub(crate) fn add_into(acc: &mut MoEModel, g: &MoEModel) {
    for ((_, a), (_, b)) in acc.params_mut().into_iter().zip(g.params()) {
        for (x, y) in a.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
}

pub(crate) fn grad_norm(g: &MoEModel) -> f64 {
    g.params()
        .iter()
        .flat_map(|(_, m)| m.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Batch-mean objective and gradients. `base` holds one base-model trace per
/// sequence and is required when `λ_rm > 0`.
pub fn backward(
    model: &MoEModel,
    batch: &[Sequence],
    base: Option<&[RoutingTrace]>,
    weights: &LossWeights,
    mode: GradMode,
    mask: &GradMask,
) -> Result<(LossComponents, GradientReport)> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(b) = base {
        if b.len() != batch.len() {
            return Err(crate::error::shape_err("backward base traces", batch.len(), b.len()));
        }
    }
    weights.validate()?;
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(LossComponents, MoEModel)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut g = model.zeros_like();
            let comp = sequence_grad(model, seq, base.map(|b| &b[i]), weights, mode, mask, scale, &mut g)?;
            Ok((comp, g))
        })
        .collect::<Result<_>>()?;
    let mut grads = model.zeros_like();
    let mut comps = LossComponents::default();
    for (c, g) in &parts {
        comps.add_scaled(c, scale);
        add_into(&mut grads, g);
    }
    comps.check_finite()?;
    let norm = grad_norm(&grads);
    Ok((comps, GradientReport { grads, norm }))
}

/// Objective evaluated straight from the forward pass and the cache/loss
/// modules, with no gradient machinery. Soft-route semantics for `L_cs`.
pub fn evaluate_objective(
    model: &MoEModel,
    batch: &[Sequence],
    base: Option<&[RoutingTrace]>,
    w: &LossWeights,
) -> Result<f64> {
    let k = model.config.top_k as f64;
    let mut total = 0.0;
    for (i, seq) in batch.iter().enumerate() {
        let (logits, trace) = model_forward(model, &seq.tokens)?;
        let nll = nll_loss(&logits, &seq.targets)?;
        let mut cs = 0.0;
        for l in 0..trace.layers {
            let mut state =
                SoftCacheState::from_init(&CacheInit::Uniform, l, trace.experts, w.c_sim, trace.top_k, w.gamma)?;
            for t in 0..trace.tokens {
                let r: Vec<f64> = trace.probs(l, t).iter().map(|p| k * p).collect();
                cs += r.iter().zip(&state.c).map(|(ri, ci)| ri * (1.0 - ci)).sum::<f64>();
                state = state.update(&r)?;
            }
        }
        cs /= (trace.layers * trace.tokens) as f64;
        let rm = match base {
            Some(b) if w.lambda_rm > 0.0 => rank_matching_loss(&[PairedTrace::new(b[i].clone(), trace)?], w.rho)?,
            _ => 0.0,
        };
        total += nll + w.lambda_cs * cs + w.lambda_rm * rm;
    }
    Ok(total / batch.len() as f64)
}

/// Flattened copy of every parameter in visiting order.
pub fn flatten(model: &MoEModel) -> Vec<f64> {
    model
        .params()
        .iter()
        .flat_map(|(_, m)| m.data.iter().copied())
        .collect()
}

/// Writes a flat vector back into the model's parameters.
pub fn unflatten(model: &mut MoEModel, flat: &[f64]) -> Result<()> {
    let n = model.num_params();
    if flat.len() != n {
        return Err(crate::error::shape_err("unflatten", n, flat.len()));
    }
    let mut off = 0;
    for (_, m) in model.params_mut() {
        let len = m.data.len();
        m.data.copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    Ok(())
}
