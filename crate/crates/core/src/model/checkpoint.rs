//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "SDLN" | version u32 | config_len u32 | config (UTF-8 key=value lines)
//!        | sha256(config ++ body) [32 bytes] | body
//! body   = record_count u32 | record*
//! record = name_len u32 | name | ndim u32 | dims u32* | values f32*
//! ```
//!
//! Parameters are stored under their names; running statistics under
//! `<layer>.running_mean` and `<layer>.running_var`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, Result, SdlNet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDLN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(super) fn encode(model: &SdlNet) -> Vec<u8> {
    let config = model.config.to_kv_text();
    let mut body = Vec::new();
    put_u32(&mut body, (model.params.len() + 2 * model.stats.len()) as u32);
    for (p, info) in model.params.iter().zip(&model.info) {
        put_record(&mut body, &info.name, p.value.shape(), p.value.data());
    }
    for (s, info) in model.stats.iter().zip(&model.stats_info) {
        put_record(&mut body, &format!("{}.running_mean", info.name), &[s.mean.len()], &s.mean);
        put_record(&mut body, &format!("{}.running_var", info.name), &[s.var.len()], &s.var);
    }
    let mut hasher = Sha256::new();
    hasher.update(config.as_bytes());
    hasher.update(&body);
    let digest = hasher.finalize();

    let mut out = Vec::with_capacity(body.len() + config.len() + 48);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (needed {n} more)", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub(super) fn decode(bytes: &[u8]) -> std::result::Result<SdlNet, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("not an SDLN checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})"));
    }
    let config_len = r.u32()? as usize;
    let config_bytes = r.take(config_len)?;
    let stored_digest = r.take(32)?;
    let body = &bytes[r.pos..];
    let mut hasher = Sha256::new();
    hasher.update(config_bytes);
    hasher.update(body);
    if hasher.finalize().as_slice() != stored_digest {
        return Err("checksum mismatch (file corrupted or truncated)".into());
    }
    let config_text = std::str::from_utf8(config_bytes).map_err(|e| format!("config is not UTF-8: {e}"))?;
    let config = ModelConfig::from_kv_text(config_text).map_err(|e| e.to_string())?;

    let count = r.u32()? as usize;
    let mut records: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| format!("record name: {e}"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or("record too large")?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if records.insert(name.clone(), (shape, values)).is_some() {
            return Err(format!("duplicate record {name:?}"));
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }

    let mut model = SdlNet::new(config, 0).map_err(|e| e.to_string())?;
    let mut take = |name: &str, shape: &[usize]| -> std::result::Result<Vec<f32>, String> {
        let (s, v) = records.remove(name).ok_or_else(|| format!("missing record {name:?}"))?;
        if s != shape {
            return Err(format!("record {name:?} has shape {s:?}, expected {shape:?}"));
        }
        Ok(v)
    };
    for i in 0..model.params.len() {
        let shape = model.params[i].value.shape().to_vec();
        let values = take(&model.info[i].name, &shape)?;
        model.params[i].value = Tensor::from_vec(&shape, values).map_err(|e| e.to_string())?;
    }
    for i in 0..model.stats.len() {
        let c = model.stats[i].mean.len();
        let name = model.stats_info[i].name.clone();
        model.stats[i].mean = take(&format!("{name}.running_mean"), &[c])?;
        model.stats[i].var = take(&format!("{name}.running_var"), &[c])?;
    }
    if let Some(extra) = records.keys().next() {
        return Err(format!("unexpected record {extra:?}"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SdlNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SdlNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ModelError::Checkpoint { path: path.display().to_string(), reason: e.to_string() })?;
    decode(&bytes).map_err(|reason| ModelError::Checkpoint { path: path.display().to_string(), reason })
}

impl SdlNet {
    /// Loads a checkpoint into this model, rejecting a different config.
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let source = load_checkpoint(&path)?;
        if source.config != self.config {
            return Err(ModelError::Checkpoint {
                path: path.as_ref().display().to_string(),
                reason: format!(
                    "config mismatch: checkpoint has\n{}but the model expects\n{}",
                    source.config.to_kv_text(),
                    self.config.to_kv_text()
                ),
            });
        }
        self.init_from(&source)
    }

    /// SHA-256 over the encoder-side parameters and running statistics of `split`.
    pub fn encoder_checksum(&self, split: super::SplitPoint) -> String {
        let mut h = Sha256::new();
        for (p, info) in self.params.iter().zip(&self.info) {
            if info.part.in_encoder(split) {
                h.update(info.name.as_bytes());
                p.value.data().iter().for_each(|v| h.update(v.to_le_bytes()));
            }
        }
        for (s, info) in self.stats.iter().zip(&self.stats_info) {
            if info.part.in_encoder(split) {
                h.update(info.name.as_bytes());
                s.mean.iter().chain(&s.var).for_each(|v| h.update(v.to_le_bytes()));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
