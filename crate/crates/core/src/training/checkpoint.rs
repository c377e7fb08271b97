//! Binary container: `HMRD`, a u32 format version, a u64 config hash, a u32
//! entry count, then named little-endian entries, closed by a SHA-256 digest
//! of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{config_hash, AdamW, TrainConfig, TrainState};
use crate::autodiff::Tensor;
use crate::config::ModelConfig;
use crate::contrastive::EmbeddingQueue;
use crate::error::{Error, Result};
use crate::model::Hammer;
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"HMRD";
const KIND_TENSOR: u8 = 0;
const KIND_BYTES: u8 = 1;

enum Entry {
    Tensor(Tensor),
    Bytes(Vec<u8>),
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn name(&mut self, name: &str) {
        self.buf.extend((name.len() as u32).to_le_bytes());
        self.buf.extend(name.as_bytes());
        self.count += 1;
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.name(name);
        self.buf.push(KIND_TENSOR);
        self.buf.extend((t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            self.buf.extend((d as u64).to_le_bytes());
        }
        self.buf.extend((t.numel() as u64).to_le_bytes());
        for v in t.data() {
            self.buf.extend(v.to_le_bytes());
        }
    }

    fn bytes(&mut self, name: &str, b: &[u8]) {
        self.name(name);
        self.buf.push(KIND_BYTES);
        self.buf.extend((b.len() as u64).to_le_bytes());
        self.buf.extend(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n} at byte {}", self.pos)))
    }

    fn entry(&mut self) -> Result<(String, Entry)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        match self.take(1)?[0] {
            KIND_TENSOR => {
                let nd = self.u32()? as usize;
                let shape = (0..nd).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
                let count = self.len()?;
                let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
                Ok((name, Entry::Tensor(t)))
            }
            KIND_BYTES => {
                let n = self.len()?;
                Ok((name, Entry::Bytes(self.take(n)?.to_vec())))
            }
            k => Err(Error::Checkpoint(format!("{name}: unknown entry kind {k}"))),
        }
    }
}

fn queue_entries(w: &mut Writer, prefix: &str, q: &EmbeddingQueue) {
    let (data, flags, len, cursor) = q.raw_parts();
    w.tensor(&format!("{prefix}.data"), &Tensor::from_parts(vec![q.capacity(), q.dim()], data.to_vec()));
    w.tensor(
        &format!("{prefix}.flags"),
        &Tensor::from_parts(vec![flags.len()], flags.iter().map(|&f| f as u8 as f64).collect()),
    );
    w.tensor(&format!("{prefix}.state"), &Tensor::vector(vec![len as f64, cursor as f64]));
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let hash = config_hash(&state.model_cfg, &state.train_cfg)?;
    let mut w = Writer { buf: Vec::new(), count: 0 };
    w.bytes("model_config", &serde_json::to_vec(&state.model_cfg)?);
    w.bytes("train_config", &serde_json::to_vec(&state.train_cfg)?);
    w.bytes("step", &state.step.to_le_bytes());
    w.bytes("adam.t", &state.opt.t.to_le_bytes());
    for (id, (name, t)) in state.online.ids().zip(state.online.iter()) {
        w.tensor(&format!("online/{name}"), t);
        w.tensor(&format!("momentum/{name}"), state.momentum.get(id));
        w.tensor(&format!("adam.m/{name}"), &state.opt.m[id.index()]);
        w.tensor(&format!("adam.v/{name}"), &state.opt.v[id.index()]);
    }
    queue_entries(&mut w, "queue.image", &state.image_queue);
    queue_entries(&mut w, "queue.text", &state.text_queue);

    let mut out = Vec::with_capacity(w.buf.len() + 64);
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(hash.to_le_bytes());
    out.extend(w.count.to_le_bytes());
    out.extend(&w.buf);
    let digest = Sha256::digest(&out);
    out.extend(digest);
    fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. `expected` (model and
/// training configs) only triggers a warning when its hash differs.
pub fn load_checkpoint(path: &Path, expected: Option<(&ModelConfig, &TrainConfig)>) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 + 4 + 8 + 4 + 32 {
        return Err(Error::Checkpoint(format!("{}: file too short", path.display())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch, file is corrupt", path.display())));
    }
    let hash = r.u64()?;
    let count = r.u32()?;
    let mut entries = std::collections::HashMap::new();
    for _ in 0..count {
        let (k, v) = r.entry()?;
        entries.insert(k, v);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last entry".into()));
    }

    let bytes_of = |entries: &std::collections::HashMap<String, Entry>, k: &str| -> Result<Vec<u8>> {
        match entries.get(k) {
            Some(Entry::Bytes(b)) => Ok(b.clone()),
            _ => Err(Error::Checkpoint(format!("missing entry {k}"))),
        }
    };
    let u64_of = |b: Vec<u8>, k: &str| -> Result<u64> {
        b.try_into().map(u64::from_le_bytes).map_err(|_| Error::Checkpoint(format!("bad entry {k}")))
    };
    let model_cfg: ModelConfig = serde_json::from_slice(&bytes_of(&entries, "model_config")?)?;
    let train_cfg: TrainConfig = serde_json::from_slice(&bytes_of(&entries, "train_config")?)?;
    if let Some((m, t)) = expected {
        if config_hash(m, t)? != hash {
            log::warn!("{}: checkpoint was written under a different configuration", path.display());
        }
    }
    let mut take = |k: String| -> Result<Tensor> {
        match entries.remove(&k) {
            Some(Entry::Tensor(t)) => Ok(t),
            _ => Err(Error::Checkpoint(format!("missing tensor {k}"))),
        }
    };

    // Rebuild the parameter layout, then overwrite every value.
    let mut online = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let model = Hammer::new(&mut online, &model_cfg, &mut rng)?;
    let mut momentum = online.clone();
    let mut opt = AdamW::new(&online, train_cfg.weight_decay);
    let ids: Vec<_> = online.ids().collect();
    for id in ids {
        let name = online.name(id).to_string();
        let shape = online.get(id).shape().to_vec();
        for (prefix, dst) in [
            ("online", online.get_mut(id)),
            ("momentum", momentum.get_mut(id)),
            ("adam.m", &mut opt.m[id.index()]),
            ("adam.v", &mut opt.v[id.index()]),
        ] {
            let t = take(format!("{prefix}/{name}"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{prefix}/{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            *dst = t;
        }
    }
    let mut queue = |prefix: &str| -> Result<EmbeddingQueue> {
        let data = take(format!("{prefix}.data"))?;
        let flags = take(format!("{prefix}.flags"))?;
        let st = take(format!("{prefix}.state"))?;
        if data.shape().len() != 2 || st.numel() != 2 {
            return Err(Error::Checkpoint(format!("{prefix}: malformed queue")));
        }
        let (cap, dim) = (data.shape()[0], data.shape()[1]);
        EmbeddingQueue::from_raw_parts(
            cap,
            dim,
            data.into_data(),
            flags.data().iter().map(|&f| f != 0.0).collect(),
            st.data()[0] as usize,
            st.data()[1] as usize,
        )
    };
    let image_queue = queue("queue.image")?;
    let text_queue = queue("queue.text")?;
    opt.t = u64_of(bytes_of(&entries, "adam.t")?, "adam.t")?;
    let step = u64_of(bytes_of(&entries, "step")?, "step")?;
    Ok(TrainState { model, online, momentum, image_queue, text_queue, opt, step, model_cfg, train_cfg })
}
