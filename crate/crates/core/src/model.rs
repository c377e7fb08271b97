//! The full detector: encoders, contrastive projections, the grounding branch
//! and the reasoning branch, wired over one parameter store.

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::config::ModelConfig;
use crate::contrastive::ProjectionHead;
use crate::encoders::{EncoderOutput, Image, ImageEncoder, TextEncoder, TokenVocab};
use crate::error::{Error, Result};
use crate::grounding::{predict_boxes, AggregateOutput, BBox, CrossAttend, CrossAttendOutput, PatchAggregator};
use crate::nn::{Graph, HeadRole, MlpHead, ParamStore};
use crate::reasoning::{AggregatedOutput, Aggregator};
use crate::synth::ManipSample;

#[derive(Clone, Debug)]
pub struct Hammer {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub image_enc: ImageEncoder,
    pub text_enc: TextEncoder,
    pub proj_v: ProjectionHead,
    pub proj_t: ProjectionHead,
    pub cross: CrossAttend,
    pub lpaa: PatchAggregator,
    pub box_head: MlpHead,
    pub aggregator: Aggregator,
    pub tok_head: MlpHead,
    pub mul_head: MlpHead,
    pub bin_head: MlpHead,
}

/// Which parts of the network a forward pass must build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Needs {
    pub projections: bool,
    pub grounding: bool,
    pub tokens: bool,
    pub classes: bool,
}

impl Needs {
    pub const ALL: Needs = Needs { projections: true, grounding: true, tokens: true, classes: true };
}

#[derive(Clone, Debug)]
pub struct GroundingOut {
    pub uv: CrossAttendOutput,
    pub agg: AggregateOutput,
    /// `[B, 4]` sigmoid corners.
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct ReasoningOut {
    pub agg: AggregatedOutput,
    /// `[B, M, 2]`.
    pub tok_logits: Option<Var>,
    /// `[B, 4]`.
    pub mul_logits: Option<Var>,
    /// `[B, 2]`.
    pub bin_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub image: EncoderOutput,
    pub text: EncoderOutput,
    pub v_proj: Option<Var>,
    pub t_proj: Option<Var>,
    pub grounding: Option<GroundingOut>,
    pub reasoning: Option<ReasoningOut>,
}

/// Model inputs for a batch of samples.
pub struct BatchInput<'a> {
    pub images: Vec<&'a Image>,
    /// `[B, 1 + M]` with `[CLS]` first.
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl<'a> BatchInput<'a> {
    pub fn new(samples: &[&'a ManipSample]) -> Self {
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for s in samples {
            let (i, m) = s.text.with_cls();
            ids.extend(i);
            mask.extend(m);
        }
        Self { images: samples.iter().map(|s| &s.image).collect(), ids, mask }
    }
}

impl Hammer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let vocab_size = TokenVocab::glyph_world().len();
        let (d, h) = (cfg.d_model, cfg.heads);
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            image_enc: ImageEncoder::new(store, "image_enc", cfg, rng)?,
            text_enc: TextEncoder::new(store, "text_enc", cfg, vocab_size, rng)?,
            proj_v: ProjectionHead::new(store, "proj_v", d, cfg.d_proj, rng),
            proj_t: ProjectionHead::new(store, "proj_t", d, cfg.d_proj, rng),
            cross: CrossAttend::new(store, "uv", d, h, rng)?,
            lpaa: PatchAggregator::new(store, "lpaa", d, h, rng)?,
            box_head: MlpHead::new(store, "box_head", d, HeadRole::BBox, rng),
            aggregator: Aggregator::new(store, "aggregator", d, h, cfg.d_ff, cfg.agg_layers, rng)?,
            tok_head: MlpHead::new(store, "tok_head", d, HeadRole::Token, rng),
            mul_head: MlpHead::new(store, "mul_head", d, HeadRole::MultiLabel, rng),
            bin_head: MlpHead::new(store, "bin_head", d, HeadRole::Binary, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, input: &BatchInput<'_>, needs: Needs) -> Result<ForwardOut> {
        if input.ids.len() != input.images.len() * (1 + self.cfg.max_text_len) {
            return Err(Error::shape("forward", &[input.images.len()], &[input.ids.len()]));
        }
        let image = self.image_enc.encode(g, &input.images)?;
        let text = self.text_enc.encode(g, &input.ids, &input.mask)?;
        let (mut v_proj, mut t_proj) = (None, None);
        if needs.projections {
            let vc = image.cls(g)?;
            let tc = text.cls(g)?;
            v_proj = Some(self.proj_v.forward(g, vc)?);
            t_proj = Some(self.proj_t.forward(g, tc)?);
        }
        let grounding = if needs.grounding {
            let uv = self.cross.forward(g, &image, &text)?;
            let pat = uv.patches(g)?;
            let agg = self.lpaa.forward(g, pat)?;
            let boxes = predict_boxes(g, &self.box_head, agg.u_agg)?;
            Some(GroundingOut { uv, agg, boxes })
        } else {
            None
        };
        let reasoning = if needs.tokens || needs.classes {
            let agg = self.aggregator.forward(g, &text, &image)?;
            let tok_logits = if needs.tokens {
                let m_tok = agg.m_tok(g)?;
                Some(self.tok_head.forward(g, m_tok)?)
            } else {
                None
            };
            let (mut mul_logits, mut bin_logits) = (None, None);
            if needs.classes {
                let m_cls = agg.m_cls(g)?;
                mul_logits = Some(self.mul_head.forward(g, m_cls)?);
                bin_logits = Some(self.bin_head.forward(g, m_cls)?);
            }
            Some(ReasoningOut { agg, tok_logits, mul_logits, bin_logits })
        } else {
            None
        };
        Ok(ForwardOut { image, text, v_proj, t_proj, grounding, reasoning })
    }
}

/// Probabilities read off a full forward pass, one entry per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities {
    pub fake: Vec<f64>,
    pub types: Vec<[f64; 4]>,
    pub boxes: Vec<BBox>,
    /// `B × M` manipulated-token probabilities.
    pub tokens: Vec<Vec<f64>>,
}

fn softmax_pos(logits: &Tensor) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|z| {
            let m = z[0].max(z[1]);
            let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
            b / (a + b)
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ForwardOut {
    pub fn probabilities(&self, g: &Graph<'_>) -> Result<Probabilities> {
        let missing = || Error::InvalidInput("forward pass did not build every head".into());
        let r = self.reasoning.as_ref().ok_or_else(missing)?;
        let gr = self.grounding.as_ref().ok_or_else(missing)?;
        let bin = g.value(r.bin_logits.ok_or_else(missing)?);
        let mul = g.value(r.mul_logits.ok_or_else(missing)?);
        let tok = g.value(r.tok_logits.ok_or_else(missing)?);
        let bx = g.value(gr.boxes);
        let m = tok.shape()[1];
        Ok(Probabilities {
            fake: softmax_pos(bin),
            types: mul.data().chunks(4).map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2]), sigmoid(c[3])]).collect(),
            boxes: bx.data().chunks(4).map(|c| BBox::from_slice(c).normalized()).collect(),
            tokens: softmax_pos(tok).chunks(m).map(<[f64]>::to_vec).collect(),
        })
    }
}
