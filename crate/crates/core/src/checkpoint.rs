//! Single-file checkpoint container.
//!
//! ```text
//! magic "FMPCCKPT", u32 version, u64 header length
//! header: UTF-8 JSON, {"meta": ..., "segments": [{"name", "shape"}, ...]}
//! segment payloads in header order, little-endian f64
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FMPCCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    segments: Vec<SegmentInfo>,
}

/// JSON metadata plus named flat parameter arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub segments: Vec<(SegmentInfo, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint { meta, segments: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) {
        let shape = vec![values.len()];
        self.segments.push((SegmentInfo { name: name.into(), shape }, values));
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments.iter().find(|(s, _)| s.name == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header { meta: self.meta.clone(), segments: self.segments.iter().map(|(s, _)| s.clone()).collect() };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.segments.iter().map(|(_, v)| v.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u64::<LittleEndian>(json.len() as u64).unwrap();
        out.extend_from_slice(&json);
        for (_, values) in &self.segments {
            for v in values {
                out.write_f64::<LittleEndian>(*v).unwrap();
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: &str| Error::format(path, r.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut c = Cursor::new(&bytes[8..]);
        let eof = |_| bad("truncated checkpoint");
        let version = c.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let len = c.read_u64::<LittleEndian>().map_err(eof)? as usize;
        let mut json = vec![0u8; len];
        c.read_exact(&mut json).map_err(eof)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
        let mut segments = Vec::with_capacity(header.segments.len());
        for info in header.segments {
            let n: usize = info.shape.iter().product();
            let mut values = vec![0.0; n];
            for v in values.iter_mut() {
                *v = c.read_f64::<LittleEndian>().map_err(eof)?;
            }
            segments.push((info, values));
        }
        if c.position() as usize != bytes.len() - 8 {
            return Err(bad("trailing bytes after the last segment"));
        }
        Ok(Checkpoint { meta: header.meta, segments })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut ck = Checkpoint::new(serde_json::json!({"epoch": 3, "name": "x"}));
        ck.push("a", vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]);
        ck.push("empty", vec![]);
        ck.push("b", vec![0.1; 7]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.segment("b").unwrap().len(), 7);
        assert!(back.segment("c").is_none());
    }

    #[test]
    fn truncation_is_detected() {
        let mut ck = Checkpoint::new(serde_json::json!(null));
        ck.push("a", vec![1.0, 2.0]);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("m")).is_err());
        assert!(Checkpoint::from_bytes(b"garbage", Path::new("m")).is_err());
    }
}
