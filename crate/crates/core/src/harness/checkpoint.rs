//! Binary checkpoints.
//!
//! Layout: magic `ESWMCKPT`, version (u32), metadata length (u64), JSON
//! metadata, tensor count (u32), then per tensor: name length (u32), name,
//! rows (u64), cols (u64), little-endian values. All integers little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Eswm, ModelConfig, Params, Scalar};

pub const MAGIC: &[u8; 8] = b"ESWMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub dtype: String,
    pub iterations: usize,
    pub seed: u64,
    pub config_hash: String,
}

fn encode<T: Scalar>(params: &Params<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("metadata serialises");
    let mut out = Vec::with_capacity(32 + meta_json.len() + params.numel() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        let (r, c) = t.value.dim();
        out.extend_from_slice(&(r as u64).to_le_bytes());
        out.extend_from_slice(&(c as u64).to_le_bytes());
        for &v in t.value.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CheckpointCorrupt(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::CheckpointCorrupt(format!("{what} too large")))
    }
}

fn decode<T: Scalar>(buf: &[u8]) -> Result<(Params<T>, CheckpointMeta)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8, "header").map_err(|_| Error::CheckpointVersion {
        found: "missing header".into(),
        expected: CHECKPOINT_VERSION,
    })?;
    if magic != MAGIC {
        return Err(Error::CheckpointVersion { found: "unrecognised header".into(), expected: CHECKPOINT_VERSION });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version.to_string(), expected: CHECKPOINT_VERSION });
    }
    let meta_len = r.u64("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::CheckpointCorrupt(format!("metadata: {e}")))?;
    if meta.dtype != T::DTYPE {
        return Err(Error::ShapeMismatch(format!("checkpoint holds {} values, requested {}", meta.dtype, T::DTYPE)));
    }
    let count = r.u32("tensor count")?;
    let mut params = Params::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64("rows")?;
        let cols = r.u64("cols")?;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(T::BYTES)).ok_or_else(|| {
            Error::CheckpointCorrupt(format!("tensor {name} has an impossible shape"))
        })?;
        let raw = r.take(n, &name)?;
        let values: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let value = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        params.push(name, value);
    }
    if r.pos != buf.len() {
        return Err(Error::CheckpointCorrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((params, meta))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &Params<T>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // write then rename so readers never see a half-written file
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode(params, meta))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Params<T>, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    decode(&fs::read(path)?)
}

/// Loads a model. With `expected`, the checkpoint must fit that
/// configuration; otherwise its own stored configuration is used.
pub fn load_model<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<(Eswm<T>, CheckpointMeta)> {
    let (params, meta) = load_checkpoint::<T>(path)?;
    let config = expected.cloned().unwrap_or_else(|| meta.model.clone());
    Ok((Eswm::from_params(config, params)?, meta))
}

pub fn save_model<T: Scalar>(path: &Path, model: &Eswm<T>, iterations: usize, seed: u64, config_hash: &str) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config().clone(),
        dtype: T::DTYPE.to_string(),
        iterations,
        seed,
        config_hash: config_hash.to_string(),
    };
    save_checkpoint(path, model.params(), &meta)
}
