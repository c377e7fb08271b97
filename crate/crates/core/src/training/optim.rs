use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Linear warmup to `peak`, then cosine decay to `floor` at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, floor: f64, warmup: u64, total: u64) -> Result<Self> {
        if !(peak > 0.0 && floor > 0.0 && floor <= peak) {
            return Err(Error::Config(format!("learning rates must satisfy 0 < floor <= peak, got {floor} / {peak}")));
        }
        if warmup == 0 || warmup >= total {
            return Err(Error::Config(format!("warmup {warmup} must be positive and below the {total} total steps")));
        }
        Ok(Self { peak, floor, warmup, total })
    }

    /// Rate for the 0-based update `step`. The ramp treats step 0 like step 1
    /// so the first update is not wasted.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * step.max(1) as f64 / self.warmup as f64;
        }
        let span = (self.total - 1).saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed updates, for bias correction.
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update. Missing gradients count as zero. A non-finite gradient
    /// rejects the whole step and leaves parameters and moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, clip_norm: Option<f64>) -> Result<f64> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::StructureMismatch(format!(
                "{} gradients and {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        let mut sq = 0.0;
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(store.name(id).to_string()));
                }
                sq += g.data().iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let scale = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for ((theta, g), (m, v)) in store.tensors_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let th = theta.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..th.len() {
                let gi = g.as_ref().map_or(0.0, |g| g.data()[i] * scale);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                th[i] -= lr * (update + wd * th[i]);
            }
        }
        Ok(norm)
    }
}
