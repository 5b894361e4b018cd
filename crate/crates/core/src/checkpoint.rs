//! Binary model checkpoints: magic bytes, a version, a JSON metadata block,
//! then one record per parameter with its name, trainable flag, shape, and
//! raw little-endian 64-bit float values. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"DBLPCKPT";
const VERSION: u32 = 1;

/// Run metadata stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Label id -> display name, in id order.
    pub label_names: Vec<String>,
    /// Hex digest of the vocabulary file the model was trained with.
    pub vocab_sha256: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub train_seconds: f64,
}

/// Writes the model and metadata to `path`; returns the file size in bytes.
pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<u64> {
    if meta.label_names.len() != model.config.num_labels {
        return Err(Error::Contract(format!(
            "{} label names for {} classes",
            meta.label_names.len(),
            model.config.num_labels
        )));
    }
    if meta.config != model.config {
        return Err(Error::Contract(
            "checkpoint metadata echoes a different config than the model's".into(),
        ));
    }
    let header = serde_json::to_vec(meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(u8::from(p.trainable));
        let shape = p.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf)
        .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))?;
    Ok(buf.len() as u64)
}

/// Byte reader with truncation checks.
struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint back into a freshly built model. The config echo
/// drives the model structure; every stored record must match a registered
/// parameter's name, shape, and trainable flag, and cover all of them.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let data = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut c = Cursor { data: &data, pos: 0 };
    let magic = c.take(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic bytes {magic:?}; not a checkpoint file"
        )));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, this build reads {VERSION}"
        )));
    }
    let header_len = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(header_len)?)?;
    // The seed only affects initial values, which are all overwritten below.
    let mut model = Model::new(meta.config.clone(), 0)?;

    let count = c.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "file stores {count} parameters, the config implies {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let trainable = match c.take(1)?[0] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Checkpoint(format!(
                    "trainable flag byte {other} for {name:?}"
                )))
            }
        };
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let id = model
            .store
            .lookup(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        let index = model.store.ids().position(|x| x == id).unwrap();
        if seen[index] {
            return Err(Error::Checkpoint(format!("duplicate parameter {name:?}")));
        }
        seen[index] = true;
        {
            let p = model.store.get(id);
            if p.tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {shape:?}, the config implies {:?}",
                    p.tensor.shape()
                )));
            }
            if p.trainable != trainable {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} trainable flag {trainable} contradicts the config's freeze rule"
                )));
            }
        }
        let values = model.store.get_mut(id).tensor.data_mut();
        for slot in values.iter_mut().take(numel) {
            *slot = c.f64()?;
        }
    }
    if c.pos != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter record",
            data.len() - c.pos
        )));
    }
    Ok((model, meta))
}
