//! The `GCMCF1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        6 bytes  "GCMCF1"
//! version      u32      currently 1
//! meta_len     u32      length of the metadata block
//! metadata     meta_len bytes of UTF-8 JSON
//! count        u32      number of tensors
//! repeated count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rows       u32
//!   cols       u32
//!   data       rows * cols f32, row-major
//! ```
//!
//! Model checkpoints, oracle sidecars and counterfactual dumps all use it.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GcmError, Result};
use crate::tensor::Mat;

pub const CONTAINER_MAGIC: &[u8; 6] = b"GCMCF1";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Mat)>,
}

impl TensorContainer {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Mat) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name).ok_or_else(|| GcmError::Format(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata)?;
        write_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        write_u32(&mut out, self.tensors.len())?;
        for (name, m) in &self.tensors {
            write_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            write_u32(&mut out, m.rows())?;
            write_u32(&mut out, m.cols())?;
            for &v in m.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(6)?;
        if magic != CONTAINER_MAGIC {
            return Err(GcmError::Format("bad magic, not a GCMCF1 container".into()));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(GcmError::Format(format!("unsupported container version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| GcmError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.f32_block(rows * cols)?;
            tensors.push((name, Mat::from_vec(rows, cols, data)?));
        }
        if !r.is_done() {
            return Err(GcmError::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| GcmError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GcmError::Format(format!(
                "truncated input: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32_block(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| GcmError::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub(crate) fn u32_block(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| GcmError::Format("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut c = TensorContainer::new(serde_json::json!({"k": 1}));
        c.push("a", Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.25 - 0.5));
        c.push("empty", Mat::zeros(0, 4));
        let back = TensorContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let mut c = TensorContainer::new(serde_json::json!({}));
        c.push("a", Mat::filled(2, 2, 1.0));
        let bytes = c.to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(TensorContainer::from_bytes(&bytes[..cut]), Err(GcmError::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TensorContainer::from_bytes(&bad), Err(GcmError::Format(_))));
    }
}
