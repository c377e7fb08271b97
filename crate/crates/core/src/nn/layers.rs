use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::params::{Graph, ParamId, ParamStore};

/// Additive score for masked-out keys; `exp` of it underflows to exactly 0.
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.normal(format!("{name}.weight"), &[in_dim, out_dim], (in_dim as f64).recip().sqrt(), rng),
            bias: store.zeros(format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.matmul(x, w)?;
        g.add_bcast(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self { gamma: store.ones(format!("{name}.gamma"), &[dim]), beta: store.zeros(format!("{name}.beta"), &[dim]) }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

/// Additive mask `[B, H, Sq, Sk]` built from a `[B, Sk]` key-validity mask.
fn key_mask_bias(key_mask: &[bool], batch: usize, heads: usize, sq: usize, sk: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * heads * sq * sk);
    for b in 0..batch {
        let row: Vec<f64> = key_mask[b * sk..(b + 1) * sk]
            .iter()
            .map(|&keep| if keep { 0.0 } else { MASKED_SCORE })
            .collect();
        for _ in 0..heads * sq {
            data.extend_from_slice(&row);
        }
    }
    Tensor::from_parts(vec![batch, heads, sq, sk], data)
}

fn split_heads(g: &mut Graph<'_>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, l, heads, d / heads])?;
    g.swap_middle(r)
}

/// Output of [`scaled_dot_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Per-head results concatenated back to `[B, Sq, d]`.
    pub values: Var,
    /// Attention weights `[B, H, Sq, Sk]`; each query row sums to 1.
    pub weights: Var,
}

/// Multi-head `softmax(q·kᵀ / √d_head)·v` for already projected inputs
/// `q [B, Sq, d]`, `k, v [B, Sk, d]`. `key_mask` (`[B, Sk]`, true = keep)
/// removes padded keys from every softmax.
pub fn scaled_dot_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || g.shape(v) != sk.as_slice() {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let (batch, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid_shape("attention", &sq, format!("{d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let scores = g.bmm(qh, kh, true)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(mask) = key_mask {
        if mask.len() != batch * lk {
            return Err(Error::shape("attention key mask", &[mask.len()], &[batch, lk]));
        }
        let bias = g.constant(key_mask_bias(mask, batch, heads, lq, lk));
        scores = g.add(scores, bias)?;
    }
    let weights = g.softmax(scores);
    let out = g.bmm(weights, vh, false)?;
    let out = g.swap_middle(out)?;
    let values = g.reshape(out, &[batch, lq, d])?;
    Ok(AttentionOutput { values, weights })
}

/// Query/key/value/output projections of a multi-head attention block.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidInput(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.query.out_dim / self.heads
    }

    /// Returns the output-projected result and the attention weights.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        context: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        let att = scaled_dot_attention(g, q, k, v, self.heads, key_mask)?;
        Ok((self.output.forward(g, att.values)?, att.weights))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output].iter().flat_map(|l| l.params()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer layer, optionally cross-attending to a context sequence.
#[derive(Clone, Debug)]
pub struct TransformerLayerParams {
    pub self_attn: AttentionParams,
    pub norm_self: LayerNorm,
    pub cross: Option<(AttentionParams, LayerNorm)>,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

/// Attention weights recorded by one layer's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub self_weights: Var,
    pub cross_weights: Option<Var>,
}

impl TransformerLayerParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let self_attn = AttentionParams::new(store, &format!("{name}.self"), d_model, heads, rng)?;
        let norm_self = LayerNorm::new(store, &format!("{name}.ln_self"), d_model);
        let cross = if cross {
            Some((
                AttentionParams::new(store, &format!("{name}.cross"), d_model, heads, rng)?,
                LayerNorm::new(store, &format!("{name}.ln_cross"), d_model),
            ))
        } else {
            None
        };
        Ok(Self {
            self_attn,
            norm_self,
            cross,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, d_ff, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d_model),
        })
    }

    /// `x += SA(LN(x)); x += CA(LN(x), context); x += FFN(LN(x))`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        self_mask: Option<&[bool]>,
        context: Option<(Var, Option<&[bool]>)>,
    ) -> Result<(Var, LayerTrace)> {
        let h = self.norm_self.forward(g, x)?;
        let (a, self_weights) = self.self_attn.forward(g, h, h, self_mask)?;
        let mut x = g.add(x, a)?;
        let mut cross_weights = None;
        match (&self.cross, context) {
            (Some((attn, norm)), Some((ctx, ctx_mask))) => {
                let h = norm.forward(g, x)?;
                let (a, w) = attn.forward(g, h, ctx, ctx_mask)?;
                x = g.add(x, a)?;
                cross_weights = Some(w);
            }
            (Some(_), None) => {
                return Err(Error::InvalidInput("cross-attention layer called without context".into()));
            }
            (None, Some(_)) => {
                return Err(Error::InvalidInput("context passed to a layer without cross-attention".into()));
            }
            (None, None) => {}
        }
        let h = self.norm_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        let x = g.add(x, f)?;
        Ok((x, LayerTrace { self_weights, cross_weights }))
    }
}

/// Role of a prediction head; fixes its output width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    Binary,
    MultiLabel,
    BBox,
    Token,
}

impl HeadRole {
    pub fn out_dim(self) -> usize {
        match self {
            HeadRole::Binary | HeadRole::Token => 2,
            HeadRole::MultiLabel | HeadRole::BBox => 4,
        }
    }
}

/// Two affine layers with a GELU between; no activation on the logits.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub out: Linear,
    pub role: HeadRole,
}

impl MlpHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, role: HeadRole, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), d_model, role.out_dim(), rng),
            role,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let d = self.hidden.in_dim;
        if g.shape(x).last() != Some(&d) {
            return Err(Error::shape("mlp head", g.shape(x), &[d]));
        }
        let h = self.hidden.forward(g, x)?;
        let h = g.gelu(h);
        self.out.forward(g, h)
    }
}
