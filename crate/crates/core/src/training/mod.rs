//! Joint optimization of the five objectives, momentum bookkeeping,
//! evaluation and checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck_batch, gradcheck_suite, TermCheck, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use optim::{AdamW, LrSchedule};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tensor, Var};
use crate::config::ModelConfig;
use crate::contrastive::{mac_loss, Denominator, EmbeddingQueue, MacInputs, Temperature};
use crate::error::{Error, Result};
use crate::grounding::{img_grounding_loss, BBox};
use crate::metrics::PredictionRecord;
use crate::model::{BatchInput, Hammer, Needs};
use crate::nn::{ema_update, Graph, LayerTrace, ParamStore};
use crate::reasoning::{bic_loss, mlc_loss, tmg_loss};
use crate::synth::ManipSample;

/// Per-term switches, in the order MAC, IMG, MLC, BIC, TMG.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub mac: bool,
    pub img: bool,
    pub mlc: bool,
    pub bic: bool,
    pub tmg: bool,
}

impl LossFlags {
    pub const ALL: LossFlags = LossFlags { mac: true, img: true, mlc: true, bic: true, tmg: true };

    pub fn as_array(&self) -> [bool; 5] {
        [self.mac, self.img, self.mlc, self.bic, self.tmg]
    }

    pub fn from_array(a: [bool; 5]) -> Self {
        Self { mac: a[0], img: a[1], mlc: a[2], bic: a[3], tmg: a[4] }
    }

    pub fn any(&self) -> bool {
        self.as_array().iter().any(|&b| b)
    }
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::ALL
    }
}

pub const TERM_NAMES: [&str; 5] = ["mac", "img", "mlc", "bic", "tmg"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub tau: f64,
    pub alpha: f64,
    pub queue_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub flags: LossFlags,
    pub loss_weights: [f64; 5],
    /// Keep the negatives-only InfoNCE denominator.
    pub literal_infonce: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            peak_lr: 1e-4,
            floor_lr: 1e-5,
            warmup: 200,
            weight_decay: 0.02,
            ema_momentum: 0.995,
            tau: crate::contrastive::DEFAULT_TEMPERATURE,
            alpha: crate::reasoning::DEFAULT_DISTILL_WEIGHT,
            queue_size: 1024,
            seed: 0,
            clip_norm: 1.0,
            flags: LossFlags::ALL,
            loss_weights: [1.0; 5],
            literal_infonce: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.queue_size == 0 {
            return bad("batch_size, epochs and queue_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum {} outside [0, 1]", self.ema_momentum));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 {
            return bad("weight_decay must be >= 0 and clip_norm > 0".into());
        }
        Temperature::new(self.tau)?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        train_len.div_ceil(self.batch_size) as u64
    }

    /// Schedule for a run over `train_len` samples. A warmup longer than the
    /// run is shortened to leave at least one decay step.
    pub fn schedule(&self, train_len: usize) -> Result<LrSchedule> {
        let total = self.steps_per_epoch(train_len) * self.epochs as u64;
        let mut warmup = self.warmup;
        if total >= 2 && warmup >= total {
            warmup = total - 1;
            log::warn!("warmup {} exceeds the {total}-step run; using {warmup}", self.warmup);
        }
        LrSchedule::new(self.peak_lr, self.floor_lr, warmup, total)
    }
}

/// Short digest of both configurations, stored in checkpoints.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> Result<u64> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model)?);
    h.update(serde_json::to_vec(train)?);
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    Ok(u64::from_le_bytes(b))
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Hammer,
    pub online: ParamStore,
    pub momentum: ParamStore,
    pub image_queue: EmbeddingQueue,
    pub text_queue: EmbeddingQueue,
    pub opt: AdamW,
    pub step: u64,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        let mut online = ParamStore::new();
        let model = Hammer::new(&mut online, model_cfg, &mut rng)?;
        let momentum = online.clone();
        let opt = AdamW::new(&online, train_cfg.weight_decay);
        Ok(Self {
            model,
            momentum,
            opt,
            image_queue: EmbeddingQueue::new(train_cfg.queue_size, model_cfg.d_proj)?,
            text_queue: EmbeddingQueue::new(train_cfg.queue_size, model_cfg.d_proj)?,
            online,
            step: 0,
            model_cfg: model_cfg.clone(),
            train_cfg: train_cfg.clone(),
        })
    }
}

/// Fixed outputs of the momentum branch for one batch.
#[derive(Clone, Debug)]
pub struct MomentumOut {
    pub v_proj: Tensor,
    pub t_proj: Tensor,
    pub tok_logits: Option<Tensor>,
}

pub fn momentum_forward(model: &Hammer, momentum: &ParamStore, input: &BatchInput<'_>, tokens: bool) -> Result<MomentumOut> {
    let mut g = Graph::new(momentum, false);
    let needs = Needs { projections: true, grounding: false, tokens, classes: false };
    let out = model.forward(&mut g, input, needs)?;
    let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
    Ok(MomentumOut {
        v_proj: get(out.v_proj).ok_or_else(|| Error::InvalidInput("missing projection".into()))?,
        t_proj: get(out.t_proj).ok_or_else(|| Error::InvalidInput("missing projection".into()))?,
        tok_logits: out.reasoning.and_then(|r| r.tok_logits).map(|v| g.value(v).clone()),
    })
}

/// Value of every active term; `None` for disabled or skipped terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: [Option<f64>; 5],
}

/// Builds `Σ w_k L_k` over the enabled terms on the online graph.
pub fn joint_loss(
    g: &mut Graph<'_>,
    state: &TrainState,
    samples: &[&ManipSample],
    mom: &MomentumOut,
) -> Result<(Var, LossBreakdown)> {
    let cfg = &state.train_cfg;
    let f = cfg.flags;
    if !f.any() {
        return Err(Error::Config("every loss term is disabled".into()));
    }
    let input = BatchInput::new(samples);
    let needs = Needs { projections: f.mac, grounding: f.img, tokens: f.tmg, classes: f.mlc || f.bic };
    let out = state.model.forward(g, &input, needs)?;
    let mut parts: [Option<Var>; 5] = [None; 5];

    if f.mac {
        let anchors: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].y_bin).collect();
        let den = if cfg.literal_infonce { Denominator::NegativesOnly } else { Denominator::WithPositive };
        let inputs = MacInputs {
            image_proj: out.v_proj.ok_or_else(|| Error::InvalidInput("missing projection".into()))?,
            text_proj: out.t_proj.ok_or_else(|| Error::InvalidInput("missing projection".into()))?,
            image_momentum: &mom.v_proj,
            text_momentum: &mom.t_proj,
            anchors: &anchors,
            image_queue: &state.image_queue,
            text_queue: &state.text_queue,
        };
        parts[0] = mac_loss(g, &inputs, Temperature::new(cfg.tau)?, den)?.map(|(l, _)| l);
    }
    if let Some(gr) = &out.grounding {
        let targets: Vec<BBox> = samples.iter().map(|s| s.y_box).collect();
        parts[1] = Some(img_grounding_loss(g, gr.boxes, &targets)?);
    }
    if let Some(r) = &out.reasoning {
        let missing = || Error::InvalidInput("classification heads were not built".into());
        if f.mlc {
            let y: Vec<[bool; 4]> = samples.iter().map(|s| s.y_mul).collect();
            parts[2] = Some(mlc_loss(g, r.mul_logits.ok_or_else(missing)?, &y)?);
        }
        if f.bic {
            let y: Vec<bool> = samples.iter().map(|s| s.y_bin).collect();
            parts[3] = Some(bic_loss(g, r.bin_logits.ok_or_else(missing)?, &y)?);
        }
        if let Some(tl) = r.tok_logits {
            let y: Vec<bool> = samples.iter().flat_map(|s| s.y_tok.iter().copied()).collect();
            let mask: Vec<bool> = samples.iter().flat_map(|s| s.text.mask.iter().copied()).collect();
            // With α = 0 no momentum logits are computed and the KL part carries no weight.
            let fallback;
            let mom_logits = match &mom.tok_logits {
                Some(t) => t,
                None => {
                    fallback = g.value(tl).clone();
                    &fallback
                }
            };
            parts[4] = Some(tmg_loss(g, tl, mom_logits, &y, &mask, cfg.alpha)?.0);
        }
    }

    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for (k, p) in parts.iter().enumerate() {
        if let Some(v) = *p {
            let w = g.scale(v, cfg.loss_weights[k]);
            breakdown.terms[k] = Some(g.value(w).item());
            total = Some(match total {
                Some(t) => g.add(t, w)?,
                None => w,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}

/// Outcome of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
    /// False when a non-finite gradient caused the update to be skipped.
    pub applied: bool,
}

/// forward → backward → update → EMA → queue push.
pub fn train_step(state: &mut TrainState, samples: &[&ManipSample], schedule: &LrSchedule) -> Result<StepLog> {
    let cfg = state.train_cfg.clone();
    let input = BatchInput::new(samples);
    let mom = momentum_forward(&state.model, &state.momentum, &input, cfg.flags.tmg && cfg.alpha > 0.0)?;
    let (breakdown, grads) = {
        let mut g = Graph::new(&state.online, true);
        let (root, breakdown) = joint_loss(&mut g, state, samples, &mom)?;
        g.backward(root)?;
        (breakdown, g.param_grads())
    };
    let lr = schedule.lr(state.step);
    let (grad_norm, applied) = match state.opt.step(&mut state.online, &grads, lr, Some(cfg.clip_norm)) {
        Ok(n) => (n, true),
        Err(Error::NonFiniteGradient(name)) => {
            log::warn!("step {}: non-finite gradient in {name}; update skipped", state.step);
            (f64::NAN, false)
        }
        Err(e) => return Err(e),
    };
    if applied {
        ema_update(&mut state.momentum, &state.online, cfg.ema_momentum)?;
    }
    let flags: Vec<bool> = samples.iter().map(|s| s.y_bin).collect();
    state.image_queue.push(&mom.v_proj, &flags)?;
    state.text_queue.push(&mom.t_proj, &flags)?;
    let log = StepLog { step: state.step, lr, grad_norm, loss: breakdown, applied };
    state.step += 1;
    Ok(log)
}

/// Visit order of epoch `epoch`; depends only on the seed.
pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    order.shuffle(&mut rng);
    order
}

/// One pass over `data` in seeded random order.
pub fn train_epoch(state: &mut TrainState, data: &[ManipSample], epoch: u64, schedule: &LrSchedule) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let order = epoch_order(state.train_cfg.seed, epoch, data.len());
    let mut logs = Vec::new();
    for chunk in order.chunks(state.train_cfg.batch_size) {
        let batch: Vec<&ManipSample> = chunk.iter().map(|&i| &data[i]).collect();
        logs.push(train_step(state, &batch, schedule)?);
    }
    Ok(logs)
}

/// Full training run; `on_epoch` sees the mean loss of each epoch.
pub fn train(state: &mut TrainState, data: &[ManipSample], mut on_epoch: impl FnMut(usize, f64)) -> Result<Vec<StepLog>> {
    let schedule = state.train_cfg.schedule(data.len())?;
    let mut all = Vec::new();
    for epoch in 0..state.train_cfg.epochs {
        let logs = train_epoch(state, data, epoch as u64, &schedule)?;
        let mean = logs.iter().map(|l| l.loss.total).sum::<f64>() / logs.len() as f64;
        on_epoch(epoch, mean);
        all.extend(logs);
    }
    Ok(all)
}

/// Raw head logits for a batch, used to compare checkpoints bitwise.
pub fn eval_logits(model: &Hammer, store: &ParamStore, samples: &[&ManipSample]) -> Result<Vec<f64>> {
    let mut g = Graph::new(store, false);
    let out = model.forward(&mut g, &BatchInput::new(samples), Needs::ALL)?;
    let mut v = Vec::new();
    if let Some(gr) = &out.grounding {
        v.extend_from_slice(g.value(gr.boxes).data());
    }
    if let Some(r) = &out.reasoning {
        for l in [r.tok_logits, r.mul_logits, r.bin_logits].into_iter().flatten() {
            v.extend_from_slice(g.value(l).data());
        }
    }
    Ok(v)
}

pub const EVAL_BATCH: usize = 64;

pub fn predict(model: &Hammer, store: &ParamStore, samples: &[ManipSample]) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&ManipSample> = chunk.iter().collect();
        let mut g = Graph::new(store, false);
        let fwd = model.forward(&mut g, &BatchInput::new(&refs), Needs::ALL)?;
        let p = fwd.probabilities(&g)?;
        for (i, s) in chunk.iter().enumerate() {
            out.push(PredictionRecord {
                id: s.id.clone(),
                fake_prob: p.fake[i],
                type_probs: p.types[i],
                bbox: p.boxes[i],
                token_probs: p.tokens[i].clone(),
            });
        }
    }
    Ok(out)
}

/// Prediction plus the attention maps behind it, for inspection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Inspection {
    pub prediction: PredictionRecord,
    /// `[heads][patches]` weights of the `[AGG]` query.
    pub agg_attention: Vec<Vec<f64>>,
    /// Last aggregator layer, head-averaged: `[text positions][image positions]`.
    pub text_to_image: Vec<Vec<f64>>,
    /// Head-averaged image-to-text weights of the grounding cross-attention.
    pub image_to_text: Vec<Vec<f64>>,
}

fn head_mean(t: &Tensor, b: usize) -> Vec<Vec<f64>> {
    // t is [B, H, Sq, Sk]
    let s = t.shape();
    let (h, sq, sk) = (s[1], s[2], s[3]);
    (0..sq)
        .map(|q| {
            (0..sk)
                .map(|k| (0..h).map(|hh| t.data()[((b * h + hh) * sq + q) * sk + k]).sum::<f64>() / h as f64)
                .collect()
        })
        .collect()
}

pub fn inspect(model: &Hammer, store: &ParamStore, samples: &[ManipSample]) -> Result<Vec<Inspection>> {
    let preds = predict(model, store, samples)?;
    let mut out = Vec::with_capacity(samples.len());
    for (chunk, pchunk) in samples.chunks(EVAL_BATCH).zip(preds.chunks(EVAL_BATCH)) {
        let refs: Vec<&ManipSample> = chunk.iter().collect();
        let mut g = Graph::new(store, false);
        let fwd = model.forward(&mut g, &BatchInput::new(&refs), Needs::ALL)?;
        let missing = || Error::InvalidInput("forward pass did not build every head".into());
        let gr = fwd.grounding.as_ref().ok_or_else(missing)?;
        let r = fwd.reasoning.as_ref().ok_or_else(missing)?;
        let agg_w = g.value(gr.agg.weights).clone();
        let uv_w = g.value(gr.uv.weights).clone();
        let last: Option<&LayerTrace> = r.agg.traces.last();
        let t2i = last.and_then(|t| t.cross_weights).map(|w| g.value(w).clone());
        for (i, p) in pchunk.iter().enumerate() {
            let s = agg_w.shape();
            let (h, n) = (s[1], s[3]);
            let agg_attention =
                (0..h).map(|hh| agg_w.data()[(i * h + hh) * n..(i * h + hh + 1) * n].to_vec()).collect();
            out.push(Inspection {
                prediction: p.clone(),
                agg_attention,
                text_to_image: t2i.as_ref().map(|w| head_mean(w, i)).unwrap_or_default(),
                image_to_text: head_mean(&uv_w, i),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
