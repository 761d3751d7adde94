//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"KATN"  u32 version  [u8; 32] sha256(model config)  u32 block_count
//! per block: u16 name_len  name  u8 ndim  u32 dims[ndim]  f32 data[prod(dims)]
//! ```
//!
//! Values are stored as 32-bit floats, so a round trip perturbs parameters
//! by about 1e-7 relative.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::ModelConfig;
use crate::harness::model::{Model, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KATN";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.config.digest());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedCheckpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into its config digest and parameter blocks.
pub fn decode(bytes: &[u8]) -> Result<([u8; 32], ParamSet)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::MalformedCheckpoint(format!("unsupported version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let count = r.u32()?;
    let mut params = ParamSet::default();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::MalformedCheckpoint("block name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .unwrap_or(usize::MAX);
        let raw = r.take(n.saturating_mul(4))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::MalformedCheckpoint(format!("block {name}: {e}")))?;
        if params.get(&name).is_some() {
            return Err(Error::MalformedCheckpoint(format!("duplicate block {name}")));
        }
        params.push(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((digest, params))
}

/// Loads a checkpoint for `config`. Shapes are checked first, then the
/// stored config digest.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (digest, params) = decode(&bytes)?;
    let model = Model::from_params(config.clone(), params)?;
    if digest != config.digest() {
        return Err(Error::ConfigDigestMismatch);
    }
    Ok(model)
}
