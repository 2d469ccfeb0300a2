//! Multi-head self-attention with optional edge-feature fusion into keys
//! and/or values, wrapped into post-norm Transformer layers.
//!
//! Graph attention gives every query `i` its own keys `K_i = φ(X, E_i) W_k`
//! and values `V_i = φ(X, E_i) W_v`. Both fusion functions are affine in
//! `E_i`, so each per-query projection splits into a shared term and an edge
//! term:
//!
//! - add: `(X + E_i W_a) W = X W + E_i (W_a W)`
//! - concat: `[X ; E_i W_c] [W_x ; W_e] = X W_x + E_i (W_c W_e)`
//!
//! With `M = W_a W` or `W_c W_e` (shape `d_e × d_in`), query `i` sees
//! logits `q_i · (k_j + E_ij M)` and output `Σ_j a_ij (v_j + E_ij M)`. The
//! edge term therefore reduces to `q_i` projected through `M` per head and to
//! the attention-weighted edge sum `Σ_j a_ij E_ij`, and the n×n×d fused tensor
//! never exists. The test module keeps a materializing version as the oracle.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edge::EdgeTensor;
use crate::params::{BoundParams, Init, ParamId, ParamStore};
use crate::tensor::{softmax_in_place, CustomBackward, NodeId, Tape, TensorError, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionLocation {
    None,
    Keys,
    Values,
    KeysAndValues,
}

impl FusionLocation {
    pub const FUSED: [FusionLocation; 3] = [Self::Keys, Self::Values, Self::KeysAndValues];

    pub fn keys(self) -> bool {
        matches!(self, Self::Keys | Self::KeysAndValues)
    }

    pub fn values(self) -> bool {
        matches!(self, Self::Values | Self::KeysAndValues)
    }

    pub fn is_fused(self) -> bool {
        self != Self::None
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Keys => "keys",
            Self::Values => "values",
            Self::KeysAndValues => "keys_and_values",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "none" => Some(Self::None),
            "keys" => Some(Self::Keys),
            "values" => Some(Self::Values),
            "keys_and_values" | "both" => Some(Self::KeysAndValues),
            _ => None,
        }
    }
}

impl fmt::Display for FusionLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionFn {
    Concat,
    Add,
}

impl FusionFn {
    pub const ALL: [FusionFn; 2] = [Self::Concat, Self::Add];

    pub fn name(self) -> &'static str {
        match self {
            Self::Concat => "concat",
            Self::Add => "add",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "concat" => Some(Self::Concat),
            "add" => Some(Self::Add),
            _ => None,
        }
    }
}

impl fmt::Display for FusionFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("invalid attention config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("edge tensor covers {got} inputs but the sequence has {expected}")]
    EdgeCount { expected: usize, got: usize },
    #[error("edge tensor width {got} does not match configured d_e {expected}")]
    EdgeWidth { expected: usize, got: usize },
    #[error("attention mask covers {got} inputs but the sequence has {expected}")]
    MaskSize { expected: usize, got: usize },
    #[error("graph attention needs a fused location and an edge tensor")]
    NotFused,
    #[error("expected {expected} layers of weights, got {got}")]
    LayerCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_in: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_width: usize,
    pub fusion_location: FusionLocation,
    pub fusion_fn: FusionFn,
    pub d_e: usize,
    /// Width of the projected edge slice under concat fusion.
    pub d_e_prime: usize,
}

impl AttentionConfig {
    pub const DEFAULT_D_E_PRIME: usize = 32;

    /// Unfused config with a `4·d_in` feed-forward layer and 12-wide edges.
    pub fn new(d_in: usize, n_heads: usize, n_layers: usize) -> Self {
        Self {
            d_in,
            n_heads,
            n_layers,
            ffn_width: 4 * d_in,
            fusion_location: FusionLocation::None,
            fusion_fn: FusionFn::Add,
            d_e: 12,
            d_e_prime: Self::DEFAULT_D_E_PRIME,
        }
    }

    pub fn with_fusion(mut self, location: FusionLocation, fusion_fn: FusionFn) -> Self {
        self.fusion_location = location;
        self.fusion_fn = fusion_fn;
        self
    }

    pub fn with_d_e(mut self, d_e: usize) -> Self {
        self.d_e = d_e;
        self
    }

    /// Per-head key and value width.
    pub fn d_k(&self) -> usize {
        self.d_in / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        let fail = |m: String| Err(AttentionError::Config(m));
        if self.d_in == 0 || self.n_heads == 0 {
            return fail("d_in and n_heads must be positive".into());
        }
        if !self.d_in.is_multiple_of(self.n_heads) {
            return fail(format!("d_in {} not divisible by n_heads {}", self.d_in, self.n_heads));
        }
        if self.ffn_width == 0 {
            return fail("ffn_width must be positive".into());
        }
        if self.fusion_location.is_fused() {
            if self.d_e == 0 {
                return fail("fused attention needs d_e >= 1".into());
            }
            if self.fusion_fn == FusionFn::Concat && self.d_e_prime == 0 {
                return fail("concat fusion needs d_e_prime >= 1".into());
            }
        }
        Ok(())
    }

    /// Input width of `W_k` (`keys`) or `W_v` under this config.
    fn projection_rows(&self, fused_here: bool) -> usize {
        if fused_here && self.fusion_fn == FusionFn::Concat {
            self.d_in + self.d_e_prime
        } else {
            self.d_in
        }
    }
}

/// Which query/key pairs may attend; `true` means allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(f(i, j));
            }
        }
        Self { n, allowed }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.allowed[i * self.n + j] = allowed;
    }
}

/// Parameter ids of one Transformer layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWeights {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    /// `W_a` (`d_e × d_in`) or `W_c` (`d_e × d_e'`), present when fused.
    pub fusion: Option<ParamId>,
}

impl LayerWeights {
    pub fn init(store: &mut ParamStore, cfg: &AttentionConfig, prefix: &str, rng: &mut impl Rng) -> Result<Self, AttentionError> {
        cfg.validate()?;
        let d = cfg.d_in;
        let f = cfg.ffn_width;
        let loc = cfg.fusion_location;
        let mut add = |name: &str, shape: &[usize], init: Init| store.add(format!("{prefix}.{name}"), shape, init, rng);
        let w_q = add("w_q", &[d, d], Init::XavierUniform);
        let w_k = add("w_k", &[cfg.projection_rows(loc.keys()), d], Init::XavierUniform);
        let w_v = add("w_v", &[cfg.projection_rows(loc.values()), d], Init::XavierUniform);
        let w_o = add("w_o", &[d, d], Init::XavierUniform);
        let b_o = add("b_o", &[d], Init::Zeros);
        let ln1_gain = add("ln1.gain", &[d], Init::Ones);
        let ln1_bias = add("ln1.bias", &[d], Init::Zeros);
        let ffn_w1 = add("ffn.w1", &[d, f], Init::XavierUniform);
        let ffn_b1 = add("ffn.b1", &[f], Init::Zeros);
        let ffn_w2 = add("ffn.w2", &[f, d], Init::XavierUniform);
        let ffn_b2 = add("ffn.b2", &[d], Init::Zeros);
        let ln2_gain = add("ln2.gain", &[d], Init::Ones);
        let ln2_bias = add("ln2.bias", &[d], Init::Zeros);
        let fusion = loc.is_fused().then(|| match cfg.fusion_fn {
            FusionFn::Add => add("w_a", &[cfg.d_e, d], Init::XavierUniform),
            FusionFn::Concat => add("w_c", &[cfg.d_e, cfg.d_e_prime], Init::XavierUniform),
        });
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            b_o,
            ln1_gain,
            ln1_bias,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln2_gain,
            ln2_bias,
            fusion,
        })
    }
}

/// Weights for `cfg.n_layers` layers named `{prefix}.{layer}.*`.
pub fn init_stack(store: &mut ParamStore, cfg: &AttentionConfig, prefix: &str, rng: &mut impl Rng) -> Result<Vec<LayerWeights>, AttentionError> {
    (0..cfg.n_layers)
        .map(|l| LayerWeights::init(store, cfg, &format!("{prefix}.{l}"), rng))
        .collect()
}

/// `[X ; E_i W_c]` for concat, `X + E_i W_a` for add.
pub fn fuse(tape: &mut Tape<'_>, fusion_fn: FusionFn, x: NodeId, e_i: NodeId, w: NodeId) -> Result<NodeId, TensorError> {
    let proj = tape.matmul(e_i, w)?;
    match fusion_fn {
        FusionFn::Concat => tape.concat_last(x, proj),
        FusionFn::Add => tape.add(x, proj),
    }
}

/// Attention output before the output projection is applied, plus the
/// `heads × n × n` probability tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionOutput {
    pub output: NodeId,
    pub probs: NodeId,
}

/// Plain multi-head attention `softmax(QKᵀ/√d_k)V`, heads concatenated and
/// output-projected. Under concat configs only the `d_in` rows of `W_k`/`W_v`
/// that read `X` are used.
pub fn vanilla_attention(
    tape: &mut Tape<'_>,
    x: NodeId,
    weights: &LayerWeights,
    bound: &BoundParams,
    cfg: &AttentionConfig,
    mask: Option<&AttentionMask>,
) -> Result<NodeId, AttentionError> {
    Ok(attention(tape, x, None, weights, bound, cfg, mask)?.output)
}

/// Attention with per-query keys and/or values fused from the edge slices
/// `E_i` according to `cfg`.
pub fn graph_attention<'p>(
    tape: &mut Tape<'p>,
    x: NodeId,
    edges: &'p EdgeTensor,
    weights: &LayerWeights,
    bound: &BoundParams,
    cfg: &AttentionConfig,
    mask: Option<&AttentionMask>,
) -> Result<NodeId, AttentionError> {
    if !cfg.fusion_location.is_fused() {
        return Err(AttentionError::NotFused);
    }
    Ok(attention(tape, x, Some(edges), weights, bound, cfg, mask)?.output)
}

/// Shared implementation; fuses only when both `edges` and a fused location
/// are present.
pub fn attention<'p>(
    tape: &mut Tape<'p>,
    x: NodeId,
    edges: Option<&'p EdgeTensor>,
    weights: &LayerWeights,
    bound: &BoundParams,
    cfg: &AttentionConfig,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput, AttentionError> {
    cfg.validate()?;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_in {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: shape,
            rhs: vec![cfg.d_in],
        }
        .into());
    }
    let n = shape[0];
    if let Some(m) = mask {
        if m.n() != n {
            return Err(AttentionError::MaskSize { expected: n, got: m.n() });
        }
    }
    let edges = edges.filter(|_| cfg.fusion_location.is_fused());
    if let Some(e) = edges {
        if e.n_obj() != n {
            return Err(AttentionError::EdgeCount { expected: n, got: e.n_obj() });
        }
        if e.d_e() != cfg.d_e {
            return Err(AttentionError::EdgeWidth {
                expected: cfg.d_e,
                got: e.d_e(),
            });
        }
    }
    let heads = cfg.n_heads;
    let dk = cfg.d_k();
    let d = cfg.d_in;

    let q = tape.matmul(x, bound[weights.w_q])?;
    let (wk_x, mk) = split_projection(tape, bound[weights.w_k], edges.is_some() && cfg.fusion_location.keys(), weights, bound, cfg)?;
    let (wv_x, mv) = split_projection(tape, bound[weights.w_v], edges.is_some() && cfg.fusion_location.values(), weights, bound, cfg)?;
    let k = tape.matmul(x, wk_x)?;
    let v = tape.matmul(x, wv_x)?;

    let mask_vec = mask.map(|m| m.allowed.clone());
    let key_edges = match (edges, mk) {
        (Some(e), Some(mk)) => {
            let g = headwise_project_t(tape, q, mk, heads, dk, cfg.d_e)?;
            Some((e, g))
        }
        _ => None,
    };
    let probs = attention_probs(tape, q, k, key_edges, n, heads, dk, cfg.d_e, mask_vec)?;
    let mut out = headwise_mix(tape, probs, v, n, heads, dk)?;
    if let (Some(e), Some(mv)) = (edges, mv) {
        let r = edge_aggregate(tape, probs, e, n, heads, cfg.d_e)?;
        let ev = headwise_project(tape, r, mv, n, heads, cfg.d_e, dk)?;
        out = tape.add(out, ev)?;
    }
    debug_assert_eq!(tape.shape(out), &[n, d]);
    let proj = tape.matmul(out, bound[weights.w_o])?;
    let output = tape.add_bias(proj, bound[weights.b_o])?;
    Ok(AttentionOutput { output, probs })
}

/// Splits `W` into the rows reading `X` and, when fused here, the
/// `d_e × d_in` edge projection `M`.
fn split_projection(
    tape: &mut Tape<'_>,
    w: NodeId,
    fused_here: bool,
    weights: &LayerWeights,
    bound: &BoundParams,
    cfg: &AttentionConfig,
) -> Result<(NodeId, Option<NodeId>), AttentionError> {
    let rows = tape.shape(w)[0];
    let w_x = if rows > cfg.d_in {
        tape.slice_rows(w, 0, cfg.d_in)?
    } else {
        w
    };
    if !fused_here {
        return Ok((w_x, None));
    }
    let fusion = bound[weights.fusion.ok_or_else(|| AttentionError::Config("fused layer without fusion weights".into()))?];
    let m = match cfg.fusion_fn {
        FusionFn::Add => tape.matmul(fusion, w)?,
        FusionFn::Concat => {
            if rows != cfg.d_in + cfg.d_e_prime {
                return Err(AttentionError::Config(format!(
                    "concat-fused projection has {rows} rows, expected {}",
                    cfg.d_in + cfg.d_e_prime
                )));
            }
            let w_e = tape.slice_rows(w, cfg.d_in, cfg.d_e_prime)?;
            tape.matmul(fusion, w_e)?
        }
    };
    Ok((w_x, Some(m)))
}

/// Post-norm layer: `LN(X + Attn(X))`, then `LN(H + FFN(H))` with a GELU FFN.
pub fn transformer_layer<'p>(
    tape: &mut Tape<'p>,
    x: NodeId,
    edges: Option<&'p EdgeTensor>,
    weights: &LayerWeights,
    bound: &BoundParams,
    cfg: &AttentionConfig,
    mask: Option<&AttentionMask>,
) -> Result<NodeId, AttentionError> {
    let att = attention(tape, x, edges, weights, bound, cfg, mask)?.output;
    let res = tape.add(x, att)?;
    let h = tape.layer_norm(res, bound[weights.ln1_gain], bound[weights.ln1_bias], LAYER_NORM_EPS)?;
    let f1 = tape.matmul(h, bound[weights.ffn_w1])?;
    let f1 = tape.add_bias(f1, bound[weights.ffn_b1])?;
    let f1 = tape.gelu(f1)?;
    let f2 = tape.matmul(f1, bound[weights.ffn_w2])?;
    let f2 = tape.add_bias(f2, bound[weights.ffn_b2])?;
    let res2 = tape.add(h, f2)?;
    Ok(tape.layer_norm(res2, bound[weights.ln2_gain], bound[weights.ln2_bias], LAYER_NORM_EPS)?)
}

/// Applies every layer in order; each sees the same `edges`.
pub fn encode_stack<'p>(
    tape: &mut Tape<'p>,
    x: NodeId,
    edges: Option<&'p EdgeTensor>,
    layers: &[LayerWeights],
    bound: &BoundParams,
    cfg: &AttentionConfig,
    mask: Option<&AttentionMask>,
) -> Result<NodeId, AttentionError> {
    if layers.len() != cfg.n_layers {
        return Err(AttentionError::LayerCount {
            expected: cfg.n_layers,
            got: layers.len(),
        });
    }
    layers
        .iter()
        .try_fold(x, |h, w| transformer_layer(tape, h, edges, w, bound, cfg, mask))
}

// Fused kernels. Row-major layouts:
//   q, k, v, out: n × (heads·dk), head h owns columns h·dk..(h+1)·dk
//   probs:        heads × n × n
//   edges:        n × n × d_e
//   g, r:         n × (heads·d_e)
//   m:            d_e × (heads·dk)

struct AttentionProbs<'p> {
    n: usize,
    heads: usize,
    dk: usize,
    d_e: usize,
    scale: f64,
    edges: Option<&'p [f64]>,
}

#[allow(clippy::too_many_arguments)]
fn attention_probs<'p>(
    tape: &mut Tape<'p>,
    q: NodeId,
    k: NodeId,
    key_edges: Option<(&'p EdgeTensor, NodeId)>,
    n: usize,
    heads: usize,
    dk: usize,
    d_e: usize,
    mask: Option<Vec<bool>>,
) -> Result<NodeId, AttentionError> {
    let width = heads * dk;
    let scale = 1.0 / (dk as f64).sqrt();
    let qv = tape.value(q);
    let kv = tape.value(k);
    let gv = key_edges.map(|(_, g)| tape.value(g));
    let ev = key_edges.map(|(e, _)| e.values());
    let mut probs = vec![0.0; heads * n * n];
    let mut logits = vec![0.0; n];
    for h in 0..heads {
        let c0 = h * dk;
        for i in 0..n {
            let qi = &qv[i * width + c0..i * width + c0 + dk];
            let gi = gv.map(|g| &g[i * heads * d_e + h * d_e..i * heads * d_e + (h + 1) * d_e]);
            let mut any = false;
            for (j, l) in logits.iter_mut().enumerate() {
                if mask.as_ref().is_some_and(|m| !m[i * n + j]) {
                    *l = f64::NEG_INFINITY;
                    continue;
                }
                any = true;
                let kj = &kv[j * width + c0..j * width + c0 + dk];
                let mut s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                if let (Some(gi), Some(e)) = (gi, ev) {
                    let eij = &e[(i * n + j) * d_e..(i * n + j + 1) * d_e];
                    s += gi.iter().zip(eij).map(|(a, b)| a * b).sum::<f64>();
                }
                *l = s * scale;
            }
            let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            if any {
                row.copy_from_slice(&logits);
                softmax_in_place(row);
            }
        }
    }
    let inputs: Vec<NodeId> = match key_edges {
        Some((_, g)) => vec![q, k, g],
        None => vec![q, k],
    };
    let rule = AttentionProbs {
        n,
        heads,
        dk,
        d_e,
        scale,
        edges: ev,
    };
    Ok(tape.custom(&inputs, vec![heads, n, n], probs, rule)?)
}

impl CustomBackward for AttentionProbs<'_> {
    fn name(&self) -> &'static str {
        "attention_probs"
    }

    fn backward(&self, inputs: &[&[f64]], output: &[f64], out_grad: &[f64], grads: &mut [Option<&mut [f64]>]) {
        let (n, heads, dk, d_e) = (self.n, self.heads, self.dk, self.d_e);
        let width = heads * dk;
        let (qv, kv) = (inputs[0], inputs[1]);
        let mut ds = vec![0.0; n];
        let (gq, rest) = grads.split_at_mut(1);
        let (gk, gg) = rest.split_at_mut(1);
        let gq = &mut gq[0];
        let gk = &mut gk[0];
        let mut gg = gg.first_mut().and_then(|g| g.as_deref_mut());
        for h in 0..heads {
            let c0 = h * dk;
            for i in 0..n {
                let base = (h * n + i) * n;
                let p = &output[base..base + n];
                let dp = &out_grad[base..base + n];
                let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    ds[j] = p[j] * (dp[j] - dot) * self.scale;
                }
                if let Some(gq) = gq.as_deref_mut() {
                    let gqi = &mut gq[i * width + c0..i * width + c0 + dk];
                    for (j, &s) in ds.iter().enumerate() {
                        if s != 0.0 {
                            let kj = &kv[j * width + c0..j * width + c0 + dk];
                            gqi.iter_mut().zip(kj).for_each(|(g, k)| *g += s * k);
                        }
                    }
                }
                if let Some(gk) = gk.as_deref_mut() {
                    let qi = &qv[i * width + c0..i * width + c0 + dk];
                    for (j, &s) in ds.iter().enumerate() {
                        if s != 0.0 {
                            let gkj = &mut gk[j * width + c0..j * width + c0 + dk];
                            gkj.iter_mut().zip(qi).for_each(|(g, q)| *g += s * q);
                        }
                    }
                }
                if let (Some(gg), Some(e)) = (gg.as_deref_mut(), self.edges) {
                    let ggi = &mut gg[i * heads * d_e + h * d_e..i * heads * d_e + (h + 1) * d_e];
                    for (j, &s) in ds.iter().enumerate() {
                        if s != 0.0 {
                            let eij = &e[(i * n + j) * d_e..(i * n + j + 1) * d_e];
                            ggi.iter_mut().zip(eij).for_each(|(g, e)| *g += s * e);
                        }
                    }
                }
            }
        }
    }
}

struct HeadwiseMix {
    n: usize,
    heads: usize,
    dk: usize,
}

/// `out[i, h] = Σ_j probs[h, i, j] v[j, h]` per head block.
fn headwise_mix(tape: &mut Tape<'_>, probs: NodeId, v: NodeId, n: usize, heads: usize, dk: usize) -> Result<NodeId, AttentionError> {
    let width = heads * dk;
    let pv = tape.value(probs);
    let vv = tape.value(v);
    let mut out = vec![0.0; n * width];
    for h in 0..heads {
        let c0 = h * dk;
        for i in 0..n {
            let p = &pv[(h * n + i) * n..(h * n + i + 1) * n];
            let oi = &mut out[i * width + c0..i * width + c0 + dk];
            for (j, &a) in p.iter().enumerate() {
                if a != 0.0 {
                    let vj = &vv[j * width + c0..j * width + c0 + dk];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += a * x);
                }
            }
        }
    }
    Ok(tape.custom(&[probs, v], vec![n, width], out, HeadwiseMix { n, heads, dk })?)
}

impl CustomBackward for HeadwiseMix {
    fn name(&self) -> &'static str {
        "headwise_mix"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], out_grad: &[f64], grads: &mut [Option<&mut [f64]>]) {
        let (n, heads, dk) = (self.n, self.heads, self.dk);
        let width = heads * dk;
        let (pv, vv) = (inputs[0], inputs[1]);
        let (gp, gv) = grads.split_at_mut(1);
        let mut gp = gp[0].as_deref_mut();
        let mut gv = gv[0].as_deref_mut();
        for h in 0..heads {
            let c0 = h * dk;
            for i in 0..n {
                let doi = &out_grad[i * width + c0..i * width + c0 + dk];
                let base = (h * n + i) * n;
                if let Some(gp) = gp.as_deref_mut() {
                    for j in 0..n {
                        let vj = &vv[j * width + c0..j * width + c0 + dk];
                        gp[base + j] += doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gv) = gv.as_deref_mut() {
                    for j in 0..n {
                        let a = pv[base + j];
                        if a != 0.0 {
                            let gvj = &mut gv[j * width + c0..j * width + c0 + dk];
                            gvj.iter_mut().zip(doi).for_each(|(g, d)| *g += a * d);
                        }
                    }
                }
            }
        }
    }
}

struct EdgeAggregate<'p> {
    n: usize,
    heads: usize,
    d_e: usize,
    edges: &'p [f64],
}

/// `r[i, h] = Σ_j probs[h, i, j] E[i, j]`.
fn edge_aggregate<'p>(tape: &mut Tape<'p>, probs: NodeId, edges: &'p EdgeTensor, n: usize, heads: usize, d_e: usize) -> Result<NodeId, AttentionError> {
    let pv = tape.value(probs);
    let e = edges.values();
    let mut r = vec![0.0; n * heads * d_e];
    for h in 0..heads {
        for i in 0..n {
            let p = &pv[(h * n + i) * n..(h * n + i + 1) * n];
            let ri = &mut r[i * heads * d_e + h * d_e..i * heads * d_e + (h + 1) * d_e];
            for (j, &a) in p.iter().enumerate() {
                if a != 0.0 {
                    let eij = &e[(i * n + j) * d_e..(i * n + j + 1) * d_e];
                    ri.iter_mut().zip(eij).for_each(|(o, x)| *o += a * x);
                }
            }
        }
    }
    let rule = EdgeAggregate { n, heads, d_e, edges: e };
    Ok(tape.custom(&[probs], vec![n, heads * d_e], r, rule)?)
}

impl CustomBackward for EdgeAggregate<'_> {
    fn name(&self) -> &'static str {
        "edge_aggregate"
    }

    fn backward(&self, _inputs: &[&[f64]], _output: &[f64], out_grad: &[f64], grads: &mut [Option<&mut [f64]>]) {
        let (n, heads, d_e) = (self.n, self.heads, self.d_e);
        let Some(gp) = grads[0].as_deref_mut() else { return };
        for h in 0..heads {
            for i in 0..n {
                let dri = &out_grad[i * heads * d_e + h * d_e..i * heads * d_e + (h + 1) * d_e];
                for j in 0..n {
                    let eij = &self.edges[(i * n + j) * d_e..(i * n + j + 1) * d_e];
                    gp[(h * n + i) * n + j] += dri.iter().zip(eij).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
}

/// Per-head `r_h · M_h`: `r` is `n × (heads·p)`, `m` is `p × (heads·q)`.
struct HeadwiseProject {
    n: usize,
    heads: usize,
    p: usize,
    q: usize,
}

fn headwise_project(tape: &mut Tape<'_>, r: NodeId, m: NodeId, n: usize, heads: usize, p: usize, q: usize) -> Result<NodeId, AttentionError> {
    let rv = tape.value(r);
    let mv = tape.value(m);
    let (rw, mw) = (heads * p, heads * q);
    let mut out = vec![0.0; n * mw];
    for i in 0..n {
        for h in 0..heads {
            let oi = &mut out[i * mw + h * q..i * mw + (h + 1) * q];
            for c in 0..p {
                let a = rv[i * rw + h * p + c];
                if a != 0.0 {
                    let mc = &mv[c * mw + h * q..c * mw + (h + 1) * q];
                    oi.iter_mut().zip(mc).for_each(|(o, x)| *o += a * x);
                }
            }
        }
    }
    Ok(tape.custom(&[r, m], vec![n, mw], out, HeadwiseProject { n, heads, p, q })?)
}

impl CustomBackward for HeadwiseProject {
    fn name(&self) -> &'static str {
        "headwise_project"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], out_grad: &[f64], grads: &mut [Option<&mut [f64]>]) {
        let (n, heads, p, q) = (self.n, self.heads, self.p, self.q);
        let (rw, mw) = (heads * p, heads * q);
        let (rv, mv) = (inputs[0], inputs[1]);
        let (gr, gm) = grads.split_at_mut(1);
        let mut gr = gr[0].as_deref_mut();
        let mut gm = gm[0].as_deref_mut();
        for i in 0..n {
            for h in 0..heads {
                let doi = &out_grad[i * mw + h * q..i * mw + (h + 1) * q];
                for c in 0..p {
                    let mc = h * q + c * mw;
                    if let Some(gr) = gr.as_deref_mut() {
                        gr[i * rw + h * p + c] += doi.iter().zip(&mv[mc..mc + q]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(gm) = gm.as_deref_mut() {
                        let a = rv[i * rw + h * p + c];
                        gm[mc..mc + q].iter_mut().zip(doi).for_each(|(g, d)| *g += a * d);
                    }
                }
            }
        }
    }
}

/// Per-head `x_h · M_hᵀ`: `x` is `n × (heads·q)`, `m` is `p × (heads·q)`,
/// output `n × (heads·p)`.
struct HeadwiseProjectT {
    n: usize,
    heads: usize,
    p: usize,
    q: usize,
}

fn headwise_project_t(tape: &mut Tape<'_>, x: NodeId, m: NodeId, heads: usize, q: usize, p: usize) -> Result<NodeId, AttentionError> {
    let n = tape.shape(x)[0];
    let xv = tape.value(x);
    let mv = tape.value(m);
    let (ow, mw) = (heads * p, heads * q);
    let mut out = vec![0.0; n * ow];
    for i in 0..n {
        for h in 0..heads {
            let xi = &xv[i * mw + h * q..i * mw + (h + 1) * q];
            for c in 0..p {
                let mc = &mv[c * mw + h * q..c * mw + (h + 1) * q];
                out[i * ow + h * p + c] = xi.iter().zip(mc).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(tape.custom(&[x, m], vec![n, ow], out, HeadwiseProjectT { n, heads, p, q })?)
}

impl CustomBackward for HeadwiseProjectT {
    fn name(&self) -> &'static str {
        "headwise_project_t"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], out_grad: &[f64], grads: &mut [Option<&mut [f64]>]) {
        let (n, heads, p, q) = (self.n, self.heads, self.p, self.q);
        let (ow, mw) = (heads * p, heads * q);
        let (xv, mv) = (inputs[0], inputs[1]);
        let (gx, gm) = grads.split_at_mut(1);
        let mut gx = gx[0].as_deref_mut();
        let mut gm = gm[0].as_deref_mut();
        for i in 0..n {
            for h in 0..heads {
                let xo = i * mw + h * q;
                for c in 0..p {
                    let d = out_grad[i * ow + h * p + c];
                    if d == 0.0 {
                        continue;
                    }
                    let mc = c * mw + h * q;
                    if let Some(gx) = gx.as_deref_mut() {
                        gx[xo..xo + q].iter_mut().zip(&mv[mc..mc + q]).for_each(|(g, m)| *g += d * m);
                    }
                    if let Some(gm) = gm.as_deref_mut() {
                        gm[mc..mc + q].iter_mut().zip(&xv[xo..xo + q]).for_each(|(g, x)| *g += d * x);
                    }
                }
            }
        }
    }
}
