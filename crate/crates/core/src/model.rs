//! Toy mixture-of-experts network: token embedding, a residual stack of
//! routed MoE layers, and a linear vocabulary head.
//!
//! Each layer computes router probabilities `p = softmax(W_r h)`, selects the
//! Top-K experts, and returns `y = Σ_{selected i} p_i · E_i(h)` without
//! renormalising `p` over the selected set. Hidden state update is
//! `h ← h + y`. There is no attention, so routing of a token depends only on
//! the token itself and the weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// How the layer output mixes experts. `Hard` evaluates only the Top-K
/// experts; `Soft` evaluates every expert weighted by its router probability
/// (the request vector is still the Top-K selection).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub routing_mode: RoutingMode,
}

impl ModelConfig {
    /// L=4, E=16, K=2, d=16, d_ff=64, V=32, T=32. A narrow residual stream
    /// keeps the next-token loss sensitive to which experts fire.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            experts: 16,
            top_k: 2,
            hidden: 16,
            ffn: 64,
            vocab: 32,
            max_len: 32,
            activation: Activation::Silu,
            routing_mode: RoutingMode::Hard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::InvalidArgument(format!(
                "top_k must satisfy 1 <= K <= E (K={}, E={})",
                self.top_k, self.experts
            )));
        }
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights {
    /// d_ff × d
    pub gate: Matrix,
    /// d_ff × d
    pub up: Matrix,
    /// d × d_ff
    pub down: Matrix,
}

impl ExpertWeights {
    pub fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        let in_std = 1.0 / (d as f64).sqrt();
        let out_std = 1.0 / (d_ff as f64).sqrt();
        Self {
            gate: Matrix::randn(d_ff, d, in_std, rng),
            up: Matrix::randn(d_ff, d, in_std, rng),
            down: Matrix::randn(d, d_ff, out_std, rng),
        }
    }

    pub fn check_shape(&self, d: usize, d_ff: usize) -> Result<()> {
        let ok = (self.gate.rows, self.gate.cols) == (d_ff, d)
            && (self.up.rows, self.up.cols) == (d_ff, d)
            && (self.down.rows, self.down.cols) == (d, d_ff);
        if !ok {
            return Err(shape_err(
                "ExpertWeights",
                format!("gate/up {d_ff}x{d}, down {d}x{d_ff}"),
                format!(
                    "gate {}x{}, up {}x{}, down {}x{}",
                    self.gate.rows, self.gate.cols, self.up.rows, self.up.cols, self.down.rows, self.down.cols
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoELayer {
    /// E × d
    pub router: Matrix,
    pub experts: Vec<ExpertWeights>,
}

impl MoELayer {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let router = Matrix::randn(cfg.experts, cfg.hidden, 1.0 / (cfg.hidden as f64).sqrt(), rng);
        let experts = (0..cfg.experts)
            .map(|_| ExpertWeights::init(cfg.hidden, cfg.ffn, rng))
            .collect();
        Self { router, experts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEModel {
    pub config: ModelConfig,
    /// V × d
    pub embed: Matrix,
    pub layers: Vec<MoELayer>,
    /// V × d
    pub head: Matrix,
}

/// Parameter groups, used for trainable-set masks and for naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embed,
    Router,
    Gate,
    Up,
    Down,
    Head,
}

impl MoEModel {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embed = Matrix::randn(config.vocab, config.hidden, 1.0, rng);
        let layers = (0..config.layers).map(|_| MoELayer::init(&config, rng)).collect();
        let head = Matrix::randn(config.vocab, config.hidden, 1.0 / (config.hidden as f64).sqrt(), rng);
        Ok(Self {
            config,
            embed,
            layers,
            head,
        })
    }

    /// Same shapes, all entries zero. Doubles as a gradient container.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        Self {
            config: self.config.clone(),
            embed: z(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| MoELayer {
                    router: z(&l.router),
                    experts: l
                        .experts
                        .iter()
                        .map(|e| ExpertWeights {
                            gate: z(&e.gate),
                            up: z(&e.up),
                            down: z(&e.down),
                        })
                        .collect(),
                })
                .collect(),
            head: z(&self.head),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.layers {
            return Err(shape_err("MoEModel.layers", c.layers, self.layers.len()));
        }
        if (self.embed.rows, self.embed.cols) != (c.vocab, c.hidden) {
            return Err(shape_err(
                "MoEModel.embed",
                format!("{}x{}", c.vocab, c.hidden),
                format!("{}x{}", self.embed.rows, self.embed.cols),
            ));
        }
        if (self.head.rows, self.head.cols) != (c.vocab, c.hidden) {
            return Err(shape_err(
                "MoEModel.head",
                format!("{}x{}", c.vocab, c.hidden),
                format!("{}x{}", self.head.rows, self.head.cols),
            ));
        }
        for layer in &self.layers {
            if (layer.router.rows, layer.router.cols) != (c.experts, c.hidden) {
                return Err(shape_err(
                    "MoELayer.router",
                    format!("{}x{}", c.experts, c.hidden),
                    format!("{}x{}", layer.router.rows, layer.router.cols),
                ));
            }
            if layer.experts.len() != c.experts {
                return Err(shape_err("MoELayer.experts", c.experts, layer.experts.len()));
            }
            for e in &layer.experts {
                e.check_shape(c.hidden, c.ffn)?;
            }
        }
        let mut finite = true;
        self.visit_params(|_, _, m| finite &= m.is_finite());
        if !finite {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(())
    }

    /// Visits every parameter matrix in a fixed order with its group and name.
    pub fn visit_params(&self, mut f: impl FnMut(ParamKind, String, &Matrix)) {
        f(ParamKind::Embed, "embed".into(), &self.embed);
        for (l, layer) in self.layers.iter().enumerate() {
            f(ParamKind::Router, format!("layers.{l}.router"), &layer.router);
            for (i, e) in layer.experts.iter().enumerate() {
                f(ParamKind::Gate, format!("layers.{l}.experts.{i}.gate"), &e.gate);
                f(ParamKind::Up, format!("layers.{l}.experts.{i}.up"), &e.up);
                f(ParamKind::Down, format!("layers.{l}.experts.{i}.down"), &e.down);
            }
        }
        f(ParamKind::Head, "head".into(), &self.head);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(ParamKind, &mut Matrix)) {
        f(ParamKind::Embed, &mut self.embed);
        for layer in &mut self.layers {
            f(ParamKind::Router, &mut layer.router);
            for e in &mut layer.experts {
                f(ParamKind::Gate, &mut e.gate);
                f(ParamKind::Up, &mut e.up);
                f(ParamKind::Down, &mut e.down);
            }
        }
        f(ParamKind::Head, &mut self.head);
    }

    /// Parameter matrices in visiting order.
    pub fn params(&self) -> Vec<(ParamKind, &Matrix)> {
        let mut out = vec![(ParamKind::Embed, &self.embed)];
        for layer in &self.layers {
            out.push((ParamKind::Router, &layer.router));
            for e in &layer.experts {
                out.push((ParamKind::Gate, &e.gate));
                out.push((ParamKind::Up, &e.up));
                out.push((ParamKind::Down, &e.down));
            }
        }
        out.push((ParamKind::Head, &self.head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Matrix)> {
        let mut out = vec![(ParamKind::Embed, &mut self.embed)];
        for layer in &mut self.layers {
            out.push((ParamKind::Router, &mut layer.router));
            for e in &mut layer.experts {
                out.push((ParamKind::Gate, &mut e.gate));
                out.push((ParamKind::Up, &mut e.up));
                out.push((ParamKind::Down, &mut e.down));
            }
        }
        out.push((ParamKind::Head, &mut self.head));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, m| n += m.data.len());
        n
    }
}

/// Per-sequence routing record: router probabilities and Top-K requests for
/// every (layer, token) position.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub layers: usize,
    pub tokens: usize,
    pub experts: usize,
    pub top_k: usize,
    /// Flat `[layer][token][expert]`.
    probs: Vec<f64>,
    /// Flat `[layer][token]`, each a list of expert ids.
    requests: Vec<Vec<usize>>,
}

impl RoutingTrace {
    pub fn new(
        layers: usize,
        tokens: usize,
        experts: usize,
        top_k: usize,
        probs: Vec<f64>,
        requests: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if probs.len() != layers * tokens * experts {
            return Err(shape_err("RoutingTrace.probs", layers * tokens * experts, probs.len()));
        }
        if requests.len() != layers * tokens {
            return Err(shape_err("RoutingTrace.requests", layers * tokens, requests.len()));
        }
        let trace = Self {
            layers,
            tokens,
            experts,
            top_k,
            probs,
            requests,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Builds a trace from request lists alone; probabilities are set to the
    /// normalised request indicator. Handy for cache experiments.
    pub fn from_requests(
        layers: usize,
        tokens: usize,
        experts: usize,
        top_k: usize,
        requests: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if requests.len() != layers * tokens {
            return Err(shape_err("RoutingTrace.requests", layers * tokens, requests.len()));
        }
        let mut probs = vec![0.0; layers * tokens * experts];
        for (pos, req) in requests.iter().enumerate() {
            for &i in req {
                if i >= experts {
                    return Err(Error::InvalidArgument(format!("expert id {i} >= E={experts}")));
                }
                probs[pos * experts + i] = 1.0 / req.len().max(1) as f64;
            }
        }
        Self::new(layers, tokens, experts, top_k, probs, requests)
    }

    pub fn empty(layers: usize, experts: usize, top_k: usize) -> Self {
        Self {
            layers,
            tokens: 0,
            experts,
            top_k,
            probs: Vec::new(),
            requests: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in 0..self.layers {
            for t in 0..self.tokens {
                let req = self.requests(l, t);
                if req.len() != self.top_k {
                    return Err(Error::InvalidArgument(format!(
                        "request at (layer {l}, token {t}) has {} experts, expected K={}",
                        req.len(),
                        self.top_k
                    )));
                }
                let mut seen = vec![false; self.experts];
                for &i in req {
                    if i >= self.experts || seen[i] {
                        return Err(Error::InvalidArgument(format!(
                            "invalid or duplicate expert id {i} at (layer {l}, token {t})"
                        )));
                    }
                    seen[i] = true;
                }
                let p = self.probs(l, t);
                if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::NonFinite(format!("probs at (layer {l}, token {t})")));
                }
                let s: f64 = p.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "probs at (layer {l}, token {t}) sum to {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn probs(&self, layer: usize, token: usize) -> &[f64] {
        let start = (layer * self.tokens + token) * self.experts;
        &self.probs[start..start + self.experts]
    }

    #[inline]
    pub fn requests(&self, layer: usize, token: usize) -> &[usize] {
        &self.requests[layer * self.tokens + token]
    }

    /// Binary request vector r over E.
    pub fn request_vector(&self, layer: usize, token: usize) -> Vec<f64> {
        let mut r = vec![0.0; self.experts];
        for &i in self.requests(layer, token) {
            r[i] = 1.0;
        }
        r
    }

    /// The request lists of one layer in token order.
    pub fn layer_requests(&self, layer: usize) -> &[Vec<usize>] {
        &self.requests[layer * self.tokens..(layer + 1) * self.tokens]
    }

    pub fn same_shape(&self, other: &RoutingTrace) -> bool {
        self.layers == other.layers
            && self.tokens == other.tokens
            && self.experts == other.experts
            && self.top_k == other.top_k
    }

    pub fn raw_probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Numerically stable softmax. Errors on non-finite input.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k_indices(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k requires 1 <= k <= {} (got k={k})",
            p.len()
        )));
    }
    if p.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("top-k input".into()));
    }
    Ok(top_k_unchecked(p, k))
}

pub(crate) fn top_k_unchecked(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Binary selection vector with ones at the Top-K positions.
pub fn top_k_select(p: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut r = vec![0.0; p.len()];
    for i in top_k_indices(p, k)? {
        r[i] = 1.0;
    }
    Ok(r)
}

/// `W_d (φ(W_g x) ⊙ W_u x)`
pub fn expert_forward(e: &ExpertWeights, x: &[f64], act: Activation) -> Result<Vec<f64>> {
    if e.gate.cols != x.len() || e.up.cols != x.len() || e.down.rows != x.len() {
        return Err(shape_err("expert_forward input", e.gate.cols, x.len()));
    }
    if e.gate.rows != e.up.rows || e.down.cols != e.gate.rows {
        return Err(shape_err("expert_forward ffn dim", e.gate.rows, e.down.cols));
    }
    Ok(expert_forward_unchecked(e, x, act))
}

pub(crate) fn expert_forward_unchecked(e: &ExpertWeights, x: &[f64], act: Activation) -> Vec<f64> {
    let g = e.gate.matvec(x);
    let u = e.up.matvec(x);
    let m: Vec<f64> = g.iter().zip(&u).map(|(&gi, &ui)| act.apply(gi) * ui).collect();
    e.down.matvec(&m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub y: Vec<f64>,
    pub probs: Vec<f64>,
    pub requests: Vec<usize>,
}

pub fn moe_layer_forward(
    layer: &MoELayer,
    x: &[f64],
    k: usize,
    act: Activation,
    mode: RoutingMode,
) -> Result<LayerOutput> {
    if layer.router.cols != x.len() {
        return Err(shape_err("moe_layer_forward router", layer.router.cols, x.len()));
    }
    if layer.router.rows != layer.experts.len() {
        return Err(shape_err(
            "moe_layer_forward experts",
            layer.router.rows,
            layer.experts.len(),
        ));
    }
    let probs = softmax(&layer.router.matvec(x))?;
    let requests = top_k_indices(&probs, k)?;
    let mut y = vec![0.0; x.len()];
    let mut mix = |i: usize| -> Result<()> {
        let out = expert_forward(&layer.experts[i], x, act)?;
        for (yj, oj) in y.iter_mut().zip(out) {
            *yj += probs[i] * oj;
        }
        Ok(())
    };
    match mode {
        RoutingMode::Hard => {
            for &i in &requests {
                mix(i)?;
            }
        }
        RoutingMode::Soft => {
            for i in 0..layer.experts.len() {
                mix(i)?;
            }
        }
    }
    Ok(LayerOutput { y, probs, requests })
}

/// Runs one token through the stack; returns output logits and per-layer outputs.
pub fn forward_token(m: &MoEModel, token: usize) -> Result<(Vec<f64>, Vec<LayerOutput>)> {
    let c = &m.config;
    if token >= c.vocab {
        return Err(Error::TokenOutOfRange {
            id: token,
            vocab: c.vocab,
        });
    }
    let mut h = m.embed.row(token).to_vec();
    let mut outs = Vec::with_capacity(c.layers);
    for layer in &m.layers {
        let out = moe_layer_forward(layer, &h, c.top_k, c.activation, c.routing_mode)?;
        for (hj, yj) in h.iter_mut().zip(&out.y) {
            *hj += yj;
        }
        outs.push(out);
    }
    let logits = (0..c.vocab).map(|v| dot(m.head.row(v), &h)).collect();
    Ok((logits, outs))
}

/// Forward pass over a token sequence: logits (T × V) and the full routing trace.
pub fn model_forward(m: &MoEModel, tokens: &[usize]) -> Result<(Matrix, RoutingTrace)> {
    let c = &m.config;
    if tokens.len() > c.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_len {}",
            tokens.len(),
            c.max_len
        )));
    }
    let t_len = tokens.len();
    let mut logits = Matrix::zeros(t_len, c.vocab);
    let mut probs = vec![0.0; c.layers * t_len * c.experts];
    let mut requests = vec![Vec::new(); c.layers * t_len];
    for (t, &tok) in tokens.iter().enumerate() {
        let (row, outs) = forward_token(m, tok)?;
        logits.row_mut(t).copy_from_slice(&row);
        for (l, out) in outs.into_iter().enumerate() {
            let start = (l * t_len + t) * c.experts;
            probs[start..start + c.experts].copy_from_slice(&out.probs);
            requests[l * t_len + t] = out.requests;
        }
    }
    let trace = RoutingTrace {
        layers: c.layers,
        tokens: t_len,
        experts: c.experts,
        top_k: c.top_k,
        probs,
        requests,
    };
    Ok((logits, trace))
}

/// Log-sum-exp of a row.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn nll_loss(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows != targets.len() {
        return Err(shape_err("nll_loss targets", logits.rows, targets.len()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("nll_loss on empty sequence".into()));
    }
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        if y >= logits.cols {
            return Err(Error::TokenOutOfRange {
                id: y,
                vocab: logits.cols,
            });
        }
        let row = logits.row(t);
        total += log_sum_exp(row) - row[y];
    }
    let nll = total / targets.len() as f64;
    if !nll.is_finite() {
        return Err(Error::NonFinite("nll".into()));
    }
    Ok(nll.max(0.0))
}
