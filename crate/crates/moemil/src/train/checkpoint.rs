//! MCKP checkpoint container, little-endian.
//!
//! ```text
//! magic "MCKP" | u32 version (=1)
//! u32 meta length | meta JSON (configs, epoch, optimizer step, rng state,
//!                   best validation F1)
//! u32 tensor count
//! per tensor: u16 name length | name | u8 rank | rank x u32 extents
//!             | numel x f32 data
//! ```
//!
//! Tensors hold the model parameters plus the Adam moment buffers
//! (`adam.m.*` / `adam.v.*`). A reload reproduces the training trajectory
//! bit-identically.

use super::adam::OptimizerState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::ParamStore;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MCKP_MAGIC: [u8; 4] = *b"MCKP";
pub const MCKP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    /// ChaCha8 state: seed bytes and stream position, hex-encoded.
    pub rng_seed: String,
    pub rng_word_pos: String,
    /// Best validation macro-F1 so far; negative when no epoch finished.
    pub best_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    /// Bundles model parameters and optimizer state into tensor records.
    pub fn assemble(
        meta: CheckpointMeta,
        store: &ParamStore<f32>,
        opt: &OptimizerState<f32>,
    ) -> Checkpoint {
        let mut tensors = Vec::with_capacity(store.len() * 3);
        for (id, name, t) in store.iter() {
            tensors.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
            tensors.push((format!("adam.m.{name}"), t.shape().to_vec(), opt.m[id.index()].clone()));
            tensors.push((format!("adam.v.{name}"), t.shape().to_vec(), opt.v[id.index()].clone()));
        }
        Checkpoint { meta, tensors }
    }

    /// Restores parameters and optimizer buffers by name; every store
    /// parameter must be present with matching shape.
    pub fn restore(&self, store: &mut ParamStore<f32>, opt: &mut OptimizerState<f32>) -> Result<()> {
        let lookup: std::collections::BTreeMap<&str, usize> = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, (n, _, _))| (n.as_str(), i))
            .collect();
        let ids: Vec<_> = store.iter().map(|(id, name, t)| (id, name.to_string(), t.shape().to_vec())).collect();
        for (id, name, shape) in ids {
            for (key, dst) in [
                (name.clone(), None),
                (format!("adam.m.{name}"), Some(true)),
                (format!("adam.v.{name}"), Some(false)),
            ] {
                let &ix = lookup.get(key.as_str()).ok_or_else(|| Error::Format {
                    path: "checkpoint".into(),
                    offset: 0,
                    reason: format!("missing tensor {key:?}"),
                })?;
                let (_, tshape, data) = &self.tensors[ix];
                if *tshape != shape {
                    return Err(Error::Format {
                        path: "checkpoint".into(),
                        offset: 0,
                        reason: format!("tensor {key:?} has shape {tshape:?}, expected {shape:?}"),
                    });
                }
                match dst {
                    None => store.get_mut(id).data_mut().copy_from_slice(data),
                    Some(true) => opt.m[id.index()].copy_from_slice(data),
                    Some(false) => opt.v[id.index()].copy_from_slice(data),
                }
            }
        }
        opt.step = self.meta.adam_step;
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MCKP_MAGIC);
    out.extend_from_slice(&MCKP_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &ckpt.tensors {
        if name.len() > u16::MAX as usize {
            return Err(Error::contract(format!("tensor name {name:?} too long")));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn decode_checkpoint(buf: &[u8], origin: &str) -> Result<Checkpoint> {
    let fail = |pos: usize, reason: String| Error::Format {
        path: origin.to_string(),
        offset: pos as u64,
        reason,
    };
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > buf.len() {
            Err(fail(pos, format!("truncated: need {n} bytes, {} left", buf.len() - pos)))
        } else {
            Ok(())
        }
    };
    let mut pos = 0usize;
    need(pos, 8)?;
    if buf[0..4] != MCKP_MAGIC {
        return Err(fail(0, "bad magic, expected \"MCKP\"".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != MCKP_VERSION {
        return Err(fail(4, format!("unsupported checkpoint version {version}")));
    }
    pos = 8;
    need(pos, 4)?;
    let meta_len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    need(pos, meta_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(&buf[pos..pos + meta_len])
        .map_err(|e| fail(pos, format!("bad meta JSON: {e}")))?;
    pos += meta_len;
    need(pos, 4)?;
    let count = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        need(pos, 2)?;
        let name_len = u16::from_le_bytes(buf[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        need(pos, name_len)?;
        let name = std::str::from_utf8(&buf[pos..pos + name_len])
            .map_err(|_| fail(pos, "tensor name is not UTF-8".into()))?
            .to_string();
        pos += name_len;
        need(pos, 1)?;
        let rank = buf[pos] as usize;
        pos += 1;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            need(pos, 4)?;
            shape.push(u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let numel: usize = shape.iter().product();
        need(pos, numel.saturating_mul(4))?;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(f32::from_le_bytes(buf[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap()));
        }
        pos += numel * 4;
        tensors.push((name, shape, data));
    }
    if pos != buf.len() {
        return Err(fail(pos, format!("{} trailing bytes", buf.len() - pos)));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

pub fn encode_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn decode_hex(s: &str) -> Result<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(Error::Config(format!("odd-length hex string {s:?}")));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Config(format!("bad hex string {s:?}")))
        })
        .collect()
}
