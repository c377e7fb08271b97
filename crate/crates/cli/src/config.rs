//! `key = value` run files. Unknown keys are errors; missing keys keep the
//! training defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hammer_core::config::ModelConfig;
use hammer_core::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset directory, overridable by `--data`.
    pub data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::desk(), train: TrainConfig::default(), data: None }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow::anyhow!("line {line}: bad value {value:?} for {key}: {e}"))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {n}: expected `key = value`, got {raw:?}");
            };
            let (key, value) = (key.trim(), value.trim());
            let t = &mut c.train;
            match key {
                "model" => {
                    c.model = match value {
                        "desk" => ModelConfig::desk(),
                        "tiny" => ModelConfig::tiny(),
                        "full" => ModelConfig::full_scale(),
                        _ => bail!("line {n}: model must be desk, tiny or full, got {value:?}"),
                    }
                }
                "data" => c.data = Some(PathBuf::from(value)),
                "batch_size" => t.batch_size = parse(key, value, n)?,
                "epochs" => t.epochs = parse(key, value, n)?,
                "peak_lr" => t.peak_lr = parse(key, value, n)?,
                "floor_lr" => t.floor_lr = parse(key, value, n)?,
                "warmup" => t.warmup = parse(key, value, n)?,
                "weight_decay" => t.weight_decay = parse(key, value, n)?,
                "ema_momentum" => t.ema_momentum = parse(key, value, n)?,
                "tau" => t.tau = parse(key, value, n)?,
                "alpha" => t.alpha = parse(key, value, n)?,
                "queue_size" => t.queue_size = parse(key, value, n)?,
                "seed" => t.seed = parse(key, value, n)?,
                "clip_norm" => t.clip_norm = parse(key, value, n)?,
                "literal_infonce" => t.literal_infonce = parse(key, value, n)?,
                "enable_mac" => t.flags.mac = parse(key, value, n)?,
                "enable_img" => t.flags.img = parse(key, value, n)?,
                "enable_mlc" => t.flags.mlc = parse(key, value, n)?,
                "enable_bic" => t.flags.bic = parse(key, value, n)?,
                "enable_tmg" => t.flags.tmg = parse(key, value, n)?,
                "weight_mac" => t.loss_weights[0] = parse(key, value, n)?,
                "weight_img" => t.loss_weights[1] = parse(key, value, n)?,
                "weight_mlc" => t.loss_weights[2] = parse(key, value, n)?,
                "weight_bic" => t.loss_weights[3] = parse(key, value, n)?,
                "weight_tmg" => t.loss_weights[4] = parse(key, value, n)?,
                _ => bail!("line {n}: unknown key {key:?}"),
            }
        }
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse_str(&text).with_context(|| format!("in {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_defaults() {
        let c = RunConfig::parse_str("# smoke run\nepochs = 3\npeak_lr=1e-3  # faster\nenable_img = false\n\nmodel = tiny\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.peak_lr, 1e-3);
        assert!(!c.train.flags.img && c.train.flags.mac);
        assert_eq!(c.model, ModelConfig::tiny());
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = RunConfig::parse_str("epochs = 2\nlearning_rate = 1").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(RunConfig::parse_str("epochs = two").is_err());
        assert!(RunConfig::parse_str("epochs").is_err());
        assert!(RunConfig::parse_str("alpha = 3").is_err());
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse_str("").unwrap(), RunConfig::default());
    }
}
