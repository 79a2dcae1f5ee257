//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "HEADRANK"
//! version    u32       FORMAT_VERSION
//! cfg_len    u32       length of the JSON-encoded ModelConfig
//! cfg        cfg_len bytes
//! n_tensors  u32
//! repeated n_tensors times:
//!   rows     u32
//!   cols     u32
//!   data     rows*cols f64 (IEEE-754 bits, row-major)
//! ```
//!
//! Tensors appear in [`TransformerParams::tensors`] order. Values are stored
//! as raw bits, so a save/load round trip is bit-exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, TransformerParams};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HEADRANK";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &TransformerParams) -> Vec<u8> {
    let cfg = serde_json::to_vec(&params.config).expect("config serializes");
    let mut out = Vec::with_capacity(16 + cfg.len() + params.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (_, m) in tensors {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TransformerParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Matrix::new(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    TransformerParams::from_tensors(config, tensors)
}

pub fn save(params: &TransformerParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<TransformerParams> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode(&bytes)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Checksum of the encoded checkpoint; identifies a parameter set.
pub fn params_checksum(params: &TransformerParams) -> String {
    sha256_hex(&encode(params))
}
