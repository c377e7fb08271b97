//! Image-side manipulation grounding: text-conditioned patch features, the
//! `[AGG]` patch aggregation, and the box regression objective.

mod bbox;

pub use bbox::{giou, BBox};

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::encoders::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{AttentionParams, Graph, HeadRole, LayerNorm, MlpHead, ParamId, ParamStore, INIT_STD};

/// One cross-attention block: image queries attend to text keys/values.
#[derive(Clone, Debug)]
pub struct CrossAttend {
    pub norm: LayerNorm,
    pub attn: AttentionParams,
}

/// `U_v`: `[B, 1 + N, d]` image sequence enriched with text context.
#[derive(Clone, Debug)]
pub struct CrossAttendOutput {
    pub seq: Var,
    pub weights: Var,
}

impl CrossAttendOutput {
    /// `[B, N, d]` patch part, `u_pat`.
    pub fn patches(&self, g: &mut Graph<'_>) -> Result<Var> {
        let n = g.shape(self.seq)[1] - 1;
        g.narrow(self.seq, 1, 1, n)
    }
}

impl CrossAttend {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), d_model),
            attn: AttentionParams::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: &EncoderOutput, text: &EncoderOutput) -> Result<CrossAttendOutput> {
        if image.d_model != text.d_model || image.batch != text.batch {
            return Err(Error::shape("cross_attend", g.shape(image.seq), g.shape(text.seq)));
        }
        let q = self.norm.forward(g, image.seq)?;
        let (a, weights) = self.attn.forward(g, q, text.seq, text.key_mask.as_deref())?;
        let seq = g.add(a, image.seq)?;
        Ok(CrossAttendOutput { seq, weights })
    }
}

/// Single learned query that pools the patch tokens.
#[derive(Clone, Debug)]
pub struct PatchAggregator {
    pub agg: ParamId,
    pub attn: AttentionParams,
}

#[derive(Clone, Debug)]
pub struct AggregateOutput {
    /// `[B, d]`.
    pub u_agg: Var,
    /// `[B, heads, 1, N]` attention of `[AGG]` over the patches.
    pub weights: Var,
}

impl PatchAggregator {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            agg: store.normal(format!("{name}.agg"), &[d_model], INIT_STD, rng),
            attn: AttentionParams::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
        })
    }

    /// `u_pat` is `[B, N, d]`, `N ≥ 1`.
    pub fn forward(&self, g: &mut Graph<'_>, u_pat: Var) -> Result<AggregateOutput> {
        let s = g.shape(u_pat).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::invalid_shape("lpaa", &s, "expected [B, N>=1, d]"));
        }
        let zeros = g.constant(Tensor::zeros(&[s[0], 1, s[2]]));
        let agg = g.param(self.agg);
        let query = g.add_bcast(zeros, agg)?;
        let (out, weights) = self.attn.forward(g, query, u_pat, None)?;
        let u_agg = g.reshape(out, &[s[0], s[2]])?;
        Ok(AggregateOutput { u_agg, weights })
    }
}

/// `[B, 4]` predicted corners in `(0, 1)`, read as `(x1, y1, x2, y2)`.
pub fn predict_boxes(g: &mut Graph<'_>, head: &MlpHead, u_agg: Var) -> Result<Var> {
    if head.role != HeadRole::BBox {
        return Err(Error::InvalidInput("box prediction needs a bbox head".into()));
    }
    let logits = head.forward(g, u_agg)?;
    Ok(g.sigmoid(logits))
}

/// Mean over the batch of `‖pred − y‖₁ + (1 − GIoU(pred, y))`; the GIoU term
/// is dropped for null targets. `pred` is `[B, 4]` straight from the sigmoid.
pub fn img_grounding_loss(g: &mut Graph<'_>, pred: Var, targets: &[BBox]) -> Result<Var> {
    let b = targets.len();
    if g.shape(pred) != [b, 4] {
        return Err(Error::shape("img_grounding_loss", g.shape(pred), &[b, 4]));
    }
    let target = Tensor::from_parts(vec![b, 4], targets.iter().flat_map(|t| t.corners()).collect());
    let t = g.constant(target);
    let diff = g.sub(pred, t)?;
    let diff = g.abs(diff);
    let l1 = g.sum_last(diff);

    let real: Vec<f64> = targets.iter().map(|t| if t.is_null() { 0.0 } else { 1.0 }).collect();
    // Null rows get a stand-in unit box so their (masked) GIoU stays finite.
    let stand_in = BBox::new(0.0, 0.0, 1.0, 1.0);
    let giou_targets: Vec<BBox> = targets.iter().map(|t| if t.is_null() { stand_in } else { *t }).collect();
    let gv = giou_on_tape(g, pred, &giou_targets)?;
    let one_minus = g.neg(gv);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let mask = g.constant(Tensor::from_parts(vec![b], real));
    let giou_part = g.mul(one_minus, mask)?;
    let per_sample = g.add(l1, giou_part)?;
    Ok(g.mean(per_sample))
}

/// Differentiable GIoU between order-normalized `pred` rows and fixed targets, `[B]`.
fn giou_on_tape(g: &mut Graph<'_>, pred: Var, targets: &[BBox]) -> Result<Var> {
    let b = targets.len();
    let col = |g: &mut Graph<'_>, j: usize| -> Result<Var> {
        let c = g.narrow(pred, 1, j, 1)?;
        g.reshape(c, &[b])
    };
    let (c0, c1, c2, c3) = (col(g, 0)?, col(g, 1)?, col(g, 2)?, col(g, 3)?);
    let px1 = g.minimum(c0, c2)?;
    let px2 = g.maximum(c0, c2)?;
    let py1 = g.minimum(c1, c3)?;
    let py2 = g.maximum(c1, c3)?;
    let tcol = |g: &mut Graph<'_>, f: fn(&BBox) -> f64| g.constant(Tensor::vector(targets.iter().map(f).collect()));
    let tx1 = tcol(g, |t| t.x1);
    let ty1 = tcol(g, |t| t.y1);
    let tx2 = tcol(g, |t| t.x2);
    let ty2 = tcol(g, |t| t.y2);

    let extent = |g: &mut Graph<'_>, lo: Var, hi: Var| g.sub(hi, lo);
    let ix1 = g.maximum(px1, tx1)?;
    let ix2 = g.minimum(px2, tx2)?;
    let iy1 = g.maximum(py1, ty1)?;
    let iy2 = g.minimum(py2, ty2)?;
    let iw = extent(g, ix1, ix2)?;
    let iw = g.relu(iw);
    let ih = extent(g, iy1, iy2)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;

    let pw = extent(g, px1, px2)?;
    let ph = extent(g, py1, py2)?;
    let area_p = g.mul(pw, ph)?;
    let area_t = g.constant(Tensor::vector(targets.iter().map(BBox::area).collect()));
    let union = g.add(area_p, area_t)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;

    let cx1 = g.minimum(px1, tx1)?;
    let cx2 = g.maximum(px2, tx2)?;
    let cy1 = g.minimum(py1, ty1)?;
    let cy2 = g.maximum(py2, ty2)?;
    let cw = extent(g, cx1, cx2)?;
    let ch = extent(g, cy1, cy2)?;
    let enclosing = g.mul(cw, ch)?;
    let gap = g.sub(enclosing, union)?;
    let penalty = g.div(gap, enclosing)?;
    g.sub(iou, penalty)
}
