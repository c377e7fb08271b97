use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ManipKind, ManipSample};
use crate::encoders::{Image, TokenizedText};
use crate::error::{Error, Result};
use crate::grounding::BBox;
use crate::synth::glyph::CANVAS;

/// Gaussian pixel noise applied to a random subset of records at write time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbConfig {
    pub fraction: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { fraction: 0.5, sigma: 0.05, seed: 0 }
    }
}

impl PerturbConfig {
    pub fn none() -> Self {
        Self { fraction: 0.0, ..Self::default() }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    image: Vec<f64>,
    tokens: Vec<usize>,
    pad_mask: Vec<bool>,
    fake_cls: Vec<String>,
    y_bin: u8,
    y_mul: [u8; 4],
    y_box: [f64; 4],
    y_tok: Vec<u8>,
    perturbed: bool,
}

impl Record {
    fn from_sample(s: &ManipSample) -> Self {
        Record {
            id: s.id.clone(),
            image: s.image.pixels.clone(),
            tokens: s.text.ids.clone(),
            pad_mask: s.text.mask.clone(),
            fake_cls: s.kinds().iter().map(|k| k.name().to_string()).collect(),
            y_bin: s.y_bin as u8,
            y_mul: s.y_mul.map(|b| b as u8),
            y_box: s.y_box.corners(),
            y_tok: s.y_tok.iter().map(|&b| b as u8).collect(),
            perturbed: s.perturbed,
        }
    }

    fn into_sample(self) -> std::result::Result<ManipSample, String> {
        let bit = |v: u8| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(format!("expected 0 or 1, got {v}")),
        };
        let y_mul = [bit(self.y_mul[0])?, bit(self.y_mul[1])?, bit(self.y_mul[2])?, bit(self.y_mul[3])?];
        let mut from_names = [false; 4];
        for n in &self.fake_cls {
            let k = ManipKind::from_name(n).ok_or_else(|| format!("unknown manipulation type {n:?}"))?;
            from_names[k.index()] = true;
        }
        if from_names != y_mul {
            return Err("fake_cls disagrees with y_mul".into());
        }
        if self.tokens.len() != self.pad_mask.len() {
            return Err("tokens and pad_mask lengths differ".into());
        }
        let image = Image::new(CANVAS, CANVAS, self.image).map_err(|e| e.to_string())?;
        let s = ManipSample {
            id: self.id,
            image,
            text: TokenizedText { ids: self.tokens, mask: self.pad_mask },
            y_bin: bit(self.y_bin)?,
            y_mul,
            y_box: BBox::from_slice(&self.y_box),
            y_tok: self.y_tok.into_iter().map(bit).collect::<std::result::Result<_, _>>()?,
            perturbed: self.perturbed,
        };
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    }
}

/// Writes one JSON record per line, perturbing a `fraction` of the images.
pub fn write_jsonl(path: &Path, pool: &[ManipSample], perturb: &PerturbConfig) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(perturb.seed);
    let noise = Normal::new(0.0, perturb.sigma.max(0.0))
        .map_err(|e| Error::InvalidInput(format!("bad perturbation sigma: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    for s in pool {
        let mut rec = Record::from_sample(s);
        if perturb.fraction > 0.0 && rng.random_bool(perturb.fraction.min(1.0)) {
            for p in &mut rec.image {
                *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            rec.perturbed = true;
        }
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates every record; the first malformed line aborts the read.
pub fn read_jsonl(path: &Path) -> Result<Vec<ManipSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        out.push(rec.into_sample().map_err(fail)?);
    }
    Ok(out)
}
