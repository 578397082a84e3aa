//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `"DLR1"`, version u32, block count u32, then per block: name length u32,
//! name bytes, rank u32, dims u32 x rank, values f32 x prod(dims) in row-major
//! order. A trailing manifest follows: stage u8, seed u64, 32-byte SHA-256 of
//! the config text, config length u32 and the config text itself.

use std::fs;
use std::path::Path;

use diffcore::{ParamStore, Tensor};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DLR1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config hash does not match the stored config text")]
    HashMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub stage: u8,
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub config_text: String,
}

impl Manifest {
    pub fn new(stage: u8, seed: u64, config_text: &str) -> Self {
        Self { stage, seed, config_hash: config_hash(config_text), config_text: config_text.to_string() }
    }

    pub fn hash_hex(&self) -> String {
        self.config_hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn encode(store: &ParamStore, manifest: &Manifest) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, store.len() as u32);
    for p in store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        put_u32(&mut out, shape.len() as u32);
        for &d in shape {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.push(manifest.stage);
    out.extend_from_slice(&manifest.seed.to_le_bytes());
    out.extend_from_slice(&manifest.config_hash);
    put_u32(&mut out, manifest.config_text.len() as u32);
    out.extend_from_slice(manifest.config_text.as_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Manifest), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("parameter name is not utf-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| CheckpointError::Corrupt("block too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        store.add(name, t).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    let stage = r.take(1)?[0];
    let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let n = r.u32()? as usize;
    let config_text =
        String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("config is not utf-8".into()))?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if self::config_hash(&config_text) != config_hash {
        return Err(CheckpointError::HashMismatch);
    }
    Ok((store, Manifest { stage, seed, config_hash, config_text }))
}

pub fn save(path: &Path, store: &ParamStore, manifest: &Manifest) -> Result<(), CheckpointError> {
    fs::write(path, encode(store, manifest)).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<(ParamStore, Manifest), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    decode(&bytes)
}

/// Rounds every parameter to f32, matching what a save/load cycle yields.
pub fn round_to_storage(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
