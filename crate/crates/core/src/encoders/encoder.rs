use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::config::ModelConfig;
use crate::encoders::image::{Image, PatchGrid};
use crate::error::{Error, Result};
use crate::nn::{Graph, LayerNorm, LayerTrace, Linear, ParamId, ParamStore, TransformerLayerParams, INIT_STD};

/// Encoder result: a `[B, 1 + L, d]` sequence whose position 0 is `[CLS]`.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub seq: Var,
    pub batch: usize,
    /// Content length `L` (patches or text positions), excluding `[CLS]`.
    pub len: usize,
    pub d_model: usize,
    /// `[B, 1 + L]` key validity; `None` when every position is real.
    pub key_mask: Option<Vec<bool>>,
    pub traces: Vec<LayerTrace>,
}

impl EncoderOutput {
    /// `[B, d]` summary embeddings.
    pub fn cls(&self, g: &mut Graph<'_>) -> Result<Var> {
        let c = g.narrow(self.seq, 1, 0, 1)?;
        g.reshape(c, &[self.batch, self.d_model])
    }

    /// `[B, L, d]` content embeddings.
    pub fn content(&self, g: &mut Graph<'_>) -> Result<Var> {
        g.narrow(self.seq, 1, 1, self.len)
    }
}

fn prepend_token(g: &mut Graph<'_>, token: ParamId, body: Var) -> Result<Var> {
    let s = g.shape(body).to_vec();
    let zeros = g.constant(Tensor::zeros(&[s[0], 1, s[2]]));
    let t = g.param(token);
    let head = g.add_bcast(zeros, t)?;
    g.concat(&[head, body], 1)
}

fn run_stack(
    g: &mut Graph<'_>,
    layers: &[TransformerLayerParams],
    mut x: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<LayerTrace>)> {
    let mut traces = Vec::with_capacity(layers.len());
    for l in layers {
        let (y, t) = l.forward(g, x, mask, None)?;
        x = y;
        traces.push(t);
    }
    Ok((x, traces))
}

/// Patch-embedding vision transformer.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub grid: PatchGrid,
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayerParams>,
    pub norm: LayerNorm,
    pub d_model: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let grid = PatchGrid::new(cfg.image_size, cfg.image_size, cfg.patch)?;
        let n = grid.patch_count();
        let d = cfg.d_model;
        let patch_proj = Linear::new(store, &format!("{name}.patch_proj"), grid.patch_dim(), d, rng);
        let cls = store.normal(format!("{name}.cls"), &[d], INIT_STD, rng);
        let pos = store.normal(format!("{name}.pos"), &[1 + n, d], INIT_STD, rng);
        let layers = (0..cfg.image_layers)
            .map(|i| TransformerLayerParams::new(store, &format!("{name}.layer{i}"), d, cfg.heads, cfg.d_ff, false, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.ln_final"), d);
        Ok(Self { grid, patch_proj, cls, pos, layers, norm, d_model: d })
    }

    /// `[B, N, p·p]` constant holding the patches of every image.
    pub fn patch_batch(&self, images: &[&Image]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.grid.patch_count() * self.grid.patch_dim());
        for img in images {
            data.extend_from_slice(self.grid.patchify(img)?.data());
        }
        Tensor::new(vec![images.len(), self.grid.patch_count(), self.grid.patch_dim()], data)
    }

    pub fn encode(&self, g: &mut Graph<'_>, images: &[&Image]) -> Result<EncoderOutput> {
        if images.is_empty() {
            return Err(Error::InvalidInput("empty image batch".into()));
        }
        let patches = g.constant(self.patch_batch(images)?);
        let emb = self.patch_proj.forward(g, patches)?;
        let x = prepend_token(g, self.cls, emb)?;
        let pos = g.param(self.pos);
        let x = g.add_bcast(x, pos)?;
        let (x, traces) = run_stack(g, &self.layers, x, None)?;
        let seq = self.norm.forward(g, x)?;
        Ok(EncoderOutput {
            seq,
            batch: images.len(),
            len: self.grid.patch_count(),
            d_model: self.d_model,
            key_mask: None,
            traces,
        })
    }
}

/// Token-embedding text transformer with padding-aware self-attention.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayerParams>,
    pub norm: LayerNorm,
    pub max_len: usize,
    pub d_model: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let embed = store.normal(format!("{name}.embed"), &[vocab_size, d], INIT_STD, rng);
        let pos = store.normal(format!("{name}.pos"), &[1 + cfg.max_text_len, d], INIT_STD, rng);
        let layers = (0..cfg.text_layers)
            .map(|i| TransformerLayerParams::new(store, &format!("{name}.layer{i}"), d, cfg.heads, cfg.d_ff, false, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.ln_final"), d);
        Ok(Self { embed, pos, layers, norm, max_len: cfg.max_text_len, d_model: d })
    }

    /// `ids` and `key_mask` are `[B, 1 + M]` with `[CLS]` already in position 0.
    pub fn encode(&self, g: &mut Graph<'_>, ids: &[usize], key_mask: &[bool]) -> Result<EncoderOutput> {
        let l = 1 + self.max_len;
        if ids.is_empty() || ids.len() % l != 0 || key_mask.len() != ids.len() {
            return Err(Error::shape("encode_text", &[ids.len()], &[key_mask.len(), l]));
        }
        let batch = ids.len() / l;
        let table = g.param(self.embed);
        let x = g.gather(table, ids, &[batch, l])?;
        let pos = g.param(self.pos);
        let x = g.add_bcast(x, pos)?;
        let (x, traces) = run_stack(g, &self.layers, x, Some(key_mask))?;
        let seq = self.norm.forward(g, x)?;
        Ok(EncoderOutput {
            seq,
            batch,
            len: self.max_len,
            d_model: self.d_model,
            key_mask: Some(key_mask.to_vec()),
            traces,
        })
    }
}
