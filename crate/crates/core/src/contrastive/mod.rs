//! Manipulation-aware contrastive learning: projection heads, momentum
//! embedding queues, and the four-way InfoNCE objective over `[CLS]` embeddings.

mod queue;

pub use queue::EmbeddingQueue;

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, ParamStore};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Fixed positive softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TEMPERATURE)
    }
}

/// How the InfoNCE denominator is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Denominator {
    /// `exp(s⁺/τ) + Σ exp(s⁻/τ)`; the loss is bounded below by 0.
    #[default]
    WithPositive,
    /// `Σ exp(s⁻/τ)` only.
    NegativesOnly,
}

/// Affine map into the contrastive space followed by L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub proj: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_proj: usize, rng: &mut impl Rng) -> Self {
        Self { proj: Linear::new(store, name, d_model, d_proj, rng) }
    }

    /// `[B, d] -> [B, d_proj]` unit-norm rows.
    pub fn forward(&self, g: &mut Graph<'_>, cls: Var) -> Result<Var> {
        let z = self.proj.forward(g, cls)?;
        l2_normalize(g, z)
    }
}

/// Row-wise `x / ‖x‖₂`. Rejects rows with zero norm.
pub fn l2_normalize(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let ss = g.sum_last(sq);
    if g.value(ss).data().iter().any(|&n| n <= 0.0 || !n.is_finite()) {
        return Err(Error::InvalidInput("cannot normalize a zero-norm embedding".into()));
    }
    let norm = g.sqrt(ss);
    g.div_rows(x, norm)
}

/// Mean InfoNCE loss over anchor rows.
///
/// `anchors` and `positives` are `[A, D]` unit-norm rows paired by index;
/// `negatives` is a `[K, D]` snapshot shared by every anchor.
pub fn infonce(
    g: &mut Graph<'_>,
    anchors: Var,
    positives: Var,
    negatives: &Tensor,
    tau: Temperature,
    denominator: Denominator,
) -> Result<Var> {
    let sa = g.shape(anchors).to_vec();
    if sa.len() != 2 || g.shape(positives) != sa.as_slice() {
        return Err(Error::shape("infonce", &sa, g.shape(positives)));
    }
    if negatives.shape().len() != 2 || negatives.shape()[1] != sa[1] {
        return Err(Error::shape("infonce negatives", negatives.shape(), &sa));
    }
    let (a, k) = (sa[0], negatives.shape()[0]);
    if k == 0 {
        return Err(Error::InvalidInput("infonce needs at least one negative".into()));
    }
    let inv_tau = 1.0 / tau.get();
    let neg_t = g.constant(transpose(negatives));
    let prod = g.mul(anchors, positives)?;
    let s_pos = g.sum_last(prod);
    let s_pos = g.reshape(s_pos, &[a, 1])?;
    let s_pos = g.scale(s_pos, inv_tau);
    let s_neg = g.matmul(anchors, neg_t)?;
    let s_neg = g.scale(s_neg, inv_tau);
    let per_anchor = match denominator {
        Denominator::WithPositive => {
            let logits = g.concat(&[s_pos, s_neg], 1)?;
            let ls = g.log_softmax(logits);
            g.narrow(ls, 1, 0, 1)?
        }
        Denominator::NegativesOnly => {
            // log Σ exp(z) = z₀ − log_softmax(z)₀
            let ls = g.log_softmax(s_neg);
            let ls0 = g.narrow(ls, 1, 0, 1)?;
            let z0 = g.narrow(s_neg, 1, 0, 1)?;
            let lse = g.sub(z0, ls0)?;
            g.sub(s_pos, lse)?
        }
    };
    let m = g.mean(per_anchor);
    Ok(g.neg(m))
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], data)
}

/// Everything the contrastive objective reads for one batch.
pub struct MacInputs<'a> {
    /// Online projected image / text embeddings, `[B, D]`.
    pub image_proj: Var,
    pub text_proj: Var,
    /// Momentum projections of the same samples, `[B, D]`, held constant.
    pub image_momentum: &'a Tensor,
    pub text_momentum: &'a Tensor,
    /// Batch rows allowed to act as anchors (pristine, matched pairs).
    pub anchors: &'a [usize],
    pub image_queue: &'a EmbeddingQueue,
    pub text_queue: &'a EmbeddingQueue,
}

/// Value of each direction, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MacTerms {
    pub v2t: f64,
    pub t2v: f64,
    pub v2v: f64,
    pub t2t: f64,
}

/// `¼ [L_v2t + L_t2v + L_v2v + L_t2t]`. Returns `None` when the batch holds
/// no anchors or a queue is still empty; the term then contributes nothing.
pub fn mac_loss(
    g: &mut Graph<'_>,
    inputs: &MacInputs<'_>,
    tau: Temperature,
    denominator: Denominator,
) -> Result<Option<(Var, MacTerms)>> {
    if inputs.anchors.is_empty() {
        log::warn!("contrastive loss skipped: batch has no pristine pairs");
        return Ok(None);
    }
    if inputs.image_queue.is_empty() || inputs.text_queue.is_empty() {
        return Ok(None);
    }
    let pick = |g: &mut Graph<'_>, v: Var| g.gather(v, inputs.anchors, &[inputs.anchors.len()]);
    let select = |t: &Tensor| -> Tensor {
        let d = t.last_dim();
        let data = inputs.anchors.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        Tensor::from_parts(vec![inputs.anchors.len(), d], data)
    };
    let v = pick(g, inputs.image_proj)?;
    let t = pick(g, inputs.text_proj)?;
    let vm = g.constant(select(inputs.image_momentum));
    let tm = g.constant(select(inputs.text_momentum));
    let img_neg = inputs.image_queue.snapshot();
    let txt_neg = inputs.text_queue.snapshot();

    let v2t = infonce(g, v, tm, &txt_neg, tau, denominator)?;
    let t2v = infonce(g, t, vm, &img_neg, tau, denominator)?;
    let v2v = infonce(g, v, vm, &img_neg, tau, denominator)?;
    let t2t = infonce(g, t, tm, &txt_neg, tau, denominator)?;
    let terms = MacTerms {
        v2t: g.value(v2t).item(),
        t2v: g.value(t2v).item(),
        v2v: g.value(v2v).item(),
        t2t: g.value(t2t).item(),
    };
    let s = g.add(v2t, t2v)?;
    let s = g.add(s, v2v)?;
    let s = g.add(s, t2t)?;
    Ok(Some((g.scale(s, 0.25), terms)))
}

#[cfg(test)]
mod tests;
