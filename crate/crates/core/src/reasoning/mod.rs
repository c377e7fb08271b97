//! Deep manipulation reasoning: the multi-modal aggregator and the token,
//! multi-label and binary objectives read off its outputs.

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::encoders::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNorm, LayerTrace, ParamStore, TransformerLayerParams};

pub const DEFAULT_DISTILL_WEIGHT: f64 = 0.4;

/// Manipulation types in label order.
pub const MANIP_TYPES: [&str; 4] = ["face_swap", "face_attribute", "text_swap", "text_attribute"];

/// Text-side stack that self-attends over text and cross-attends to the image.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub layers: Vec<TransformerLayerParams>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct AggregatedOutput {
    /// `[B, 1 + M, d]`; position 0 is `m_cls`.
    pub seq: Var,
    pub batch: usize,
    pub len: usize,
    pub d_model: usize,
    pub traces: Vec<LayerTrace>,
}

impl AggregatedOutput {
    /// `[B, d]`.
    pub fn m_cls(&self, g: &mut Graph<'_>) -> Result<Var> {
        let c = g.narrow(self.seq, 1, 0, 1)?;
        g.reshape(c, &[self.batch, self.d_model])
    }

    /// `[B, M, d]`, aligned with the text content positions.
    pub fn m_tok(&self, g: &mut Graph<'_>) -> Result<Var> {
        g.narrow(self.seq, 1, 1, self.len)
    }
}

impl Aggregator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| TransformerLayerParams::new(store, &format!("{name}.layer{i}"), d_model, heads, d_ff, true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, norm: LayerNorm::new(store, &format!("{name}.ln_final"), d_model) })
    }

    pub fn forward(&self, g: &mut Graph<'_>, text: &EncoderOutput, image: &EncoderOutput) -> Result<AggregatedOutput> {
        if text.d_model != image.d_model || text.batch != image.batch {
            return Err(Error::shape("aggregate", g.shape(text.seq), g.shape(image.seq)));
        }
        let mut x = text.seq;
        let mut traces = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, t) = l.forward(g, x, text.key_mask.as_deref(), Some((image.seq, image.key_mask.as_deref())))?;
            x = y;
            traces.push(t);
        }
        let seq = self.norm.forward(g, x)?;
        Ok(AggregatedOutput { seq, batch: text.batch, len: text.len, d_model: text.d_model, traces })
    }
}

/// Row-wise log-softmax of a fixed logit tensor.
fn log_softmax_rows(t: &Tensor) -> Vec<f64> {
    let c = t.last_dim();
    let mut out = Vec::with_capacity(t.numel());
    for row in t.data().chunks(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|z| z - lse));
    }
    out
}

/// Value of each part of the token objective, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TmgTerms {
    pub ce: f64,
    pub distill: f64,
}

/// `(1 − α)·CE + α·KL[online ‖ momentum]`, each averaged over the unpadded
/// positions. `online` is `[B, M, 2]`; `momentum` the matching fixed logits.
pub fn tmg_loss(
    g: &mut Graph<'_>,
    online: Var,
    momentum: &Tensor,
    y_tok: &[bool],
    pad_mask: &[bool],
    alpha: f64,
) -> Result<(Var, TmgTerms)> {
    let s = g.shape(online).to_vec();
    if s.len() != 3 || s[2] != 2 || momentum.shape() != s.as_slice() {
        return Err(Error::shape("tmg_loss", &s, momentum.shape()));
    }
    let n = s[0] * s[1];
    if y_tok.len() != n || pad_mask.len() != n {
        return Err(Error::shape("tmg_loss labels", &[y_tok.len(), pad_mask.len()], &s[..2]));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("distillation weight must lie in [0, 1], got {alpha}")));
    }
    let real = pad_mask.iter().filter(|&&m| m).count();
    if real == 0 {
        return Err(Error::InvalidInput("token loss over an all-padding batch".into()));
    }
    let w = g.constant(Tensor::from_parts(
        s[..2].to_vec(),
        pad_mask.iter().map(|&m| if m { 1.0 / real as f64 } else { 0.0 }).collect(),
    ));
    let onehot = g.constant(Tensor::from_parts(
        s.clone(),
        y_tok.iter().flat_map(|&y| if y { [0.0, 1.0] } else { [1.0, 0.0] }).collect(),
    ));
    let ls = g.log_softmax(online);
    let picked = g.mul(ls, onehot)?;
    let picked = g.sum_last(picked);
    let ce = g.mul(picked, w)?;
    let ce = g.sum(ce);
    let ce = g.neg(ce);

    let log_q = g.constant(Tensor::from_parts(s.clone(), log_softmax_rows(momentum)));
    let p = g.exp(ls);
    let ratio = g.sub(ls, log_q)?;
    let kl = g.mul(p, ratio)?;
    let kl = g.sum_last(kl);
    let kl = g.mul(kl, w)?;
    let kl = g.sum(kl);

    let terms = TmgTerms { ce: g.value(ce).item(), distill: g.value(kl).item() };
    let a = g.scale(ce, 1.0 - alpha);
    let b = g.scale(kl, alpha);
    Ok((g.add(a, b)?, terms))
}

/// Mean per-label sigmoid cross-entropy; `logits` is `[B, 4]`.
pub fn mlc_loss(g: &mut Graph<'_>, logits: Var, y_mul: &[[bool; 4]]) -> Result<Var> {
    if g.shape(logits) != [y_mul.len(), 4] {
        return Err(Error::shape("mlc_loss", g.shape(logits), &[y_mul.len(), 4]));
    }
    // softplus(z) − y·z
    let y = g.constant(Tensor::from_parts(
        vec![y_mul.len(), 4],
        y_mul.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    ));
    let sp = g.softplus(logits);
    let yz = g.mul(y, logits)?;
    let l = g.sub(sp, yz)?;
    Ok(g.mean(l))
}

/// Mean two-class cross-entropy; class 1 is "fake". `logits` is `[B, 2]`.
pub fn bic_loss(g: &mut Graph<'_>, logits: Var, y_bin: &[bool]) -> Result<Var> {
    if g.shape(logits) != [y_bin.len(), 2] {
        return Err(Error::shape("bic_loss", g.shape(logits), &[y_bin.len(), 2]));
    }
    let onehot = g.constant(Tensor::from_parts(
        vec![y_bin.len(), 2],
        y_bin.iter().flat_map(|&y| if y { [0.0, 1.0] } else { [1.0, 0.0] }).collect(),
    ));
    let ls = g.log_softmax(logits);
    let picked = g.mul(ls, onehot)?;
    let picked = g.sum_last(picked);
    let m = g.mean(picked);
    Ok(g.neg(m))
}
