//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MSFP" | u32 version=1 | u32 json_len | json meta blob
//! u32 param_count
//! per parameter (lexicographic name order):
//!   u32 name_len | name utf-8 | u32 rank | u32 dims[rank] | f32 payload
//! u8 has_optimizer
//! if 1: u64 step | u32 count | per entry:
//!   u32 name_len | name utf-8 | u32 len | f32 m[len] | f32 v[len]
//! u64 crc64 over every preceding byte
//! ```
//!
//! Round trips are bit-exact, including optimizer moments.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ParamStore;
use crate::config::ModelConfig;
use crate::tensor::Tensor;
use crate::train::AdamState;

const MAGIC: &[u8; 4] = b"MSFP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checksum mismatch: file is corrupt")]
    Checksum,
    #[error("truncated file: {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Config echo stored inside the checkpoint, including the MOS
/// normalization constants learned from the training manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub patch_size: usize,
    pub mos_min: f64,
    pub mos_max: f64,
    pub seed: u64,
}

impl CheckpointMeta {
    /// Map a raw MOS value to the [0, 1] training target range.
    pub fn normalize_mos(&self, mos: f64) -> f64 {
        if self.mos_max > self.mos_min {
            (mos - self.mos_min) / (self.mos_max - self.mos_min)
        } else {
            mos
        }
    }

    /// Map a normalized prediction back to the raw MOS range.
    pub fn denormalize(&self, score: f64) -> f64 {
        if self.mos_max > self.mos_min {
            self.mos_min + score * (self.mos_max - self.mos_min)
        } else {
            score
        }
    }
}

// CRC-64/ECMA-182, bit-reflected (the XZ variant).
fn crc64(bytes: &[u8]) -> u64 {
    const POLY: u64 = 0xC96C_5795_D787_0F42;
    let mut table = [0u64; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut crc = i as u64;
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ POLY } else { crc >> 1 };
        }
        *entry = crc;
    }
    let mut crc = !0u64;
    for &b in bytes {
        crc = table[((crc ^ b as u64) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for &v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| CheckpointError::Format(format!("invalid utf-8 in {what}")))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(4 * n, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serialize the store (and optimizer state, when present) to `path`.
pub fn save_checkpoint(
    store: &ParamStore<f32>,
    meta: &CheckpointMeta,
    optimizer: Option<&AdamState<f32>>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    let json = serde_json::to_vec(meta)
        .map_err(|e| CheckpointError::Format(format!("meta serialization: {e}")))?;
    put_u32(&mut buf, json.len() as u32);
    buf.extend_from_slice(&json);

    put_u32(&mut buf, store.len() as u32);
    for (name, t) in store.iter() {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        put_f32s(&mut buf, &t.to_vec());
    }

    match optimizer {
        Some(state) => {
            buf.push(1);
            buf.extend_from_slice(&state.step_count().to_le_bytes());
            let names: Vec<&String> = state.moment_names().collect();
            put_u32(&mut buf, names.len() as u32);
            for name in names {
                let (m, v) = state.moments(name).expect("moment names are consistent");
                put_str(&mut buf, name);
                put_u32(&mut buf, m.len() as u32);
                put_f32s(&mut buf, m);
                put_f32s(&mut buf, v);
            }
        }
        None => buf.push(0),
    }

    let crc = crc64(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint, validating magic, version and checksum.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(ParamStore<f32>, CheckpointMeta, Option<AdamState<f32>>), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated("header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored_crc = u64::from_le_bytes(tail.try_into().unwrap());
    if crc64(body) != stored_crc {
        return Err(CheckpointError::Checksum);
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let json_len = r.u32("meta length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len, "meta blob")?)
        .map_err(|e| CheckpointError::Format(format!("meta parse: {e}")))?;

    let count = r.u32("param count")? as usize;
    let mut store = ParamStore::new(meta.seed);
    for _ in 0..count {
        let name = r.string("param name")?;
        let rank = r.u32("param rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("param dim")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f32s(n, "param payload")?;
        let trainable = !name.starts_with("backbone.");
        let t = Tensor::leaf(shape, data, trainable)
            .map_err(|e| CheckpointError::Format(format!("param '{name}': {e}")))?;
        store
            .insert(&name, t)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
    }

    let has_opt = r.take(1, "optimizer flag")?[0];
    let optimizer = match has_opt {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let count = r.u32("optimizer count")? as usize;
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            for _ in 0..count {
                let name = r.string("moment name")?;
                let len = r.u32("moment length")? as usize;
                m.insert(name.clone(), r.f32s(len, "first moment")?);
                v.insert(name, r.f32s(len, "second moment")?);
            }
            Some(AdamState::from_parts(step, m, v))
        }
        other => {
            return Err(CheckpointError::Format(format!(
                "invalid optimizer flag {other}"
            )))
        }
    };

    if r.pos != body.len() {
        return Err(CheckpointError::Format("trailing bytes after payload".into()));
    }
    Ok((store, meta, optimizer))
}
