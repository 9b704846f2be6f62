//! Binary serialization of parameters and latent dumps.
//!
//! Checkpoint layout (`LSKP1`):
//!
//! ```text
//! magic  b"LSKP1"
//! u32    entry count
//! entry* u32 name_len, name (UTF-8),
//!        u8 ndim, u32 dim_0..dim_{ndim-1},
//!        u8 dtype (0 = f32),
//!        u64 byte offset into the blob region
//! blob   raw little-endian f32 values, densely packed
//! ```
//!
//! Entries are written sorted by name so the same parameters always produce
//! the same bytes; round-trips are bit-exact.
//!
//! Latent dumps (`LSLT1`) hold a list of 2-D f32 matrices:
//!
//! ```text
//! magic  b"LSLT1"
//! u32    matrix count
//! per    u32 rows, u32 cols, rows*cols little-endian f32
//! ```
//!
//! Both loaders treat their input as untrusted: every read is bounds-checked
//! and malformed files yield an error, never a panic.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 5] = b"LSKP1";
const LATENT_MAGIC: &[u8; 5] = b"LSLT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected}, file starts differently")]
    BadMagic { expected: &'static str },
    #[error("truncated file while reading {what}")]
    Truncated { what: &'static str },
    #[error("invalid UTF-8 in parameter name")]
    BadName,
    #[error("unsupported dtype {0}")]
    BadDtype(u8),
    #[error("entry `{name}` has inconsistent geometry")]
    BadGeometry { name: String },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn parse_manifest(r: &mut Reader) -> Result<Vec<ManifestEntry>, CheckpointError> {
    let magic = r.take(5, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic { expected: "LSKP1" });
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let dtype = r.u8("dtype")?;
        if dtype != 0 {
            return Err(CheckpointError::BadDtype(dtype));
        }
        let offset = r.u64("offset")?;
        entries.push(ManifestEntry { name, shape, offset });
    }
    Ok(entries)
}

fn read_entries(buf: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader::new(buf);
    let entries = parse_manifest(&mut r)?;
    let blob = &buf[r.pos..];
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::BadGeometry { name: e.name.clone() })?;
        let bytes = numel
            .checked_mul(4)
            .ok_or_else(|| CheckpointError::BadGeometry { name: e.name.clone() })?;
        let start = usize::try_from(e.offset)
            .map_err(|_| CheckpointError::BadGeometry { name: e.name.clone() })?;
        let end = start
            .checked_add(bytes)
            .ok_or_else(|| CheckpointError::BadGeometry { name: e.name.clone() })?;
        if end > blob.len() {
            return Err(CheckpointError::Truncated { what: "blob data" });
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)));
    }
    Ok(out)
}

/// Serialize a parameter store to checkpoint bytes.
pub fn store_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut order: Vec<usize> = store.indices().collect();
    order.sort_by(|&a, &b| store.name(a).cmp(store.name(b)));

    let mut manifest = Vec::new();
    let mut blob = Vec::new();
    manifest.extend_from_slice(CKPT_MAGIC);
    manifest.extend_from_slice(&(order.len() as u32).to_le_bytes());
    for &idx in &order {
        let name = store.name(idx).as_bytes();
        let t = store.tensor(idx);
        manifest.extend_from_slice(&(name.len() as u32).to_le_bytes());
        manifest.extend_from_slice(name);
        manifest.push(t.shape().len() as u8);
        for &d in t.shape() {
            manifest.extend_from_slice(&(d as u32).to_le_bytes());
        }
        manifest.push(0u8); // dtype f32
        manifest.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.extend_from_slice(&blob);
    manifest
}

pub fn save_store(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&store_to_bytes(store))?;
    Ok(())
}

/// Parse checkpoint bytes into `(name, tensor)` pairs.
pub fn bytes_to_entries(buf: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    read_entries(buf)
}

/// Load a checkpoint into an existing store. Every entry must match an
/// existing parameter name and shape, and every parameter must be covered.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let buf = fs::read(path)?;
    let entries = read_entries(&buf)?;
    if entries.len() != store.len() {
        return Err(CheckpointError::Mismatch(format!(
            "file has {} entries, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        if !store.contains(&name) {
            return Err(CheckpointError::Mismatch(format!("unexpected entry `{name}`")));
        }
        let idx = store.index_of(&name);
        if store.tensor(idx).shape() != t.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "shape mismatch for `{name}`: file {:?}, model {:?}",
                t.shape(),
                store.tensor(idx).shape()
            )));
        }
        *store.tensor_mut(idx) = t;
    }
    Ok(())
}

// ── latent dumps ────────────────────────────────────────────────────────

pub fn latents_to_bytes(mats: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&(mats.len() as u32).to_le_bytes());
    for m in mats {
        let (r, c) = m.dims2();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn bytes_to_latents(buf: &[u8]) -> Result<Vec<Tensor>, CheckpointError> {
    let mut r = Reader::new(buf);
    let magic = r.take(5, "magic")?;
    if magic != LATENT_MAGIC {
        return Err(CheckpointError::BadMagic { expected: "LSLT1" });
    }
    let count = r.u32("matrix count")? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let numel = rows
            .checked_mul(cols)
            .ok_or(CheckpointError::Truncated { what: "latent shape" })?;
        let bytes = numel
            .checked_mul(4)
            .ok_or(CheckpointError::Truncated { what: "latent shape" })?;
        let raw = r.take(bytes, "latent data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(Tensor::new(vec![rows, cols], data));
    }
    Ok(out)
}

pub fn save_latents(mats: &[Tensor], path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, latents_to_bytes(mats))?;
    Ok(())
}

pub fn load_latents(path: &Path) -> Result<Vec<Tensor>, CheckpointError> {
    let buf = fs::read(path)?;
    bytes_to_latents(&buf)
}
