//! Versioned container for named float32 arrays plus JSON metadata.
//!
//! Used for generator checkpoints, classifier weights and crafted adversarial
//! batches. Layout, little-endian throughout:
//!
//! ```text
//! magic     8 bytes   "ADVFARC\0"
//! version   u32       1
//! meta_len  u32       length of the JSON metadata in bytes
//! meta      meta_len  UTF-8 JSON object (always carries a "kind" string)
//! count     u32       number of arrays
//! repeated count times:
//!   name_len u32, name (UTF-8), ndim u32, dims (ndim × u32), data (f32 × Πdims)
//! ```
//!
//! Writes go to a sibling temporary file that is renamed into place, so a
//! reader never observes a half-written archive.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::NamedArray;

const MAGIC: &[u8; 8] = b"ADVFARC\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub meta: Value,
    pub arrays: Vec<NamedArray>,
}

impl TensorArchive {
    pub fn new(kind: &str, mut meta: Value, arrays: Vec<NamedArray>) -> Self {
        if let Value::Object(m) = &mut meta {
            m.insert("kind".into(), Value::String(kind.into()));
        } else {
            meta = serde_json::json!({ "kind": kind });
        }
        Self { meta, arrays }
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind").and_then(Value::as_str)
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Arrays whose name starts with `prefix`, with the prefix stripped.
    pub fn arrays_with_prefix(&self, prefix: &str) -> Vec<NamedArray> {
        self.arrays
            .iter()
            .filter_map(|a| {
                a.name.strip_prefix(prefix).map(|rest| NamedArray {
                    name: rest.to_string(),
                    shape: a.shape.clone(),
                    data: a.data.clone(),
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::InvalidArgument(format!("unserializable metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let expected: usize = a.shape.iter().product();
            if expected != a.data.len() {
                return Err(Error::shape(format!("array {}", a.name), expected, a.data.len()));
            }
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for d in &a.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported archive version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "array name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.at != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last array"));
        }
        Ok(Self { meta, arrays })
    }

    /// Atomic write: temporary sibling file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(self.path, "truncated archive"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
