//! Model dimensions. `desk()` is the default small CPU configuration;
//! `full_scale()` keeps the full-size layer counts and widths as a preset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub agg_layers: usize,
    /// Width of the contrastive projection space.
    pub d_proj: usize,
    pub image_size: usize,
    pub patch: usize,
    /// Number of content token positions (the `[CLS]` slot is extra).
    pub max_text_len: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_ff: 256,
            image_layers: 4,
            text_layers: 2,
            agg_layers: 2,
            d_proj: 32,
            image_size: 32,
            patch: 8,
            max_text_len: 12,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            d_model: 768,
            heads: 12,
            d_ff: 3072,
            image_layers: 12,
            text_layers: 6,
            agg_layers: 6,
            d_proj: 256,
            ..Self::desk()
        }
    }

    /// Smallest configuration that still exercises every module; used by
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            heads: 2,
            d_ff: 12,
            image_layers: 1,
            text_layers: 1,
            agg_layers: 1,
            d_proj: 4,
            ..Self::desk()
        }
    }

    pub fn patches_per_image(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.heads,
            self.d_ff,
            self.image_layers,
            self.text_layers,
            self.agg_layers,
            self.d_proj,
            self.image_size,
            self.patch,
            self.max_text_len,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Config(format!("image size {} not divisible by patch {}", self.image_size, self.patch)));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
