//! Versioned binary container of named, CRC-32 checked segments.
//!
//! Layout: magic `SCCKPT\0\0`, version `u32`, segment count `u32`, then per
//! segment: name length `u16`, name, payload length `u64`, payload, CRC-32 of
//! name and payload. All integers little-endian. A file is decoded and
//! verified completely before any segment is handed out.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SCCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segments(pub BTreeMap<String, Vec<u8>>);

impl Segments {
    pub fn put(&mut self, name: &str, bytes: Vec<u8>) {
        self.0.insert(name.to_string(), bytes);
    }

    pub fn put_f64s(&mut self, name: &str, values: &[f64]) {
        self.put(name, values.iter().flat_map(|v| v.to_le_bytes()).collect());
    }

    pub fn put_json<T: serde::Serialize>(&mut self, name: &str, value: &T) {
        self.put(name, serde_json::to_vec(value).expect("serialisable"));
    }

    pub fn get(&self, path: &Path, name: &str) -> Result<&[u8]> {
        self.0.get(name).map(|v| v.as_slice()).ok_or_else(|| Error::format(path, format!("missing segment {name}")))
    }

    pub fn get_f64s(&self, path: &Path, name: &str) -> Result<Vec<f64>> {
        let b = self.get(path, name)?;
        if b.len() % 8 != 0 {
            return Err(Error::format(path, format!("segment {name} is not a float array")));
        }
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn get_json<T: serde::de::DeserializeOwned>(&self, path: &Path, name: &str) -> Result<T> {
        serde_json::from_slice(self.get(path, name)?).map_err(|e| Error::format(path, format!("segment {name}: {e}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        for (name, payload) in &self.0 {
            let mut h = crc32fast::Hasher::new();
            h.update(name.as_bytes());
            h.update(payload);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
            out.extend_from_slice(&h.finalize().to_le_bytes());
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("checkpoint version {version}, this build reads {VERSION}")));
        }
        let count = r.u32()?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.take(n)?.to_vec();
            let len = r.u64()? as usize;
            let payload = r.take(len)?.to_vec();
            let crc = r.u32()?;
            let mut h = crc32fast::Hasher::new();
            h.update(&name);
            h.update(&payload);
            let name = String::from_utf8(name).map_err(|_| Error::format(path, "segment name is not UTF-8"))?;
            if h.finalize() != crc {
                return Err(Error::format(path, format!("checksum mismatch in segment {name}")));
            }
            map.insert(name, payload);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last segment"));
        }
        Ok(Self(map))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so a crash never leaves a half-written file in place
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "checksum failure: checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
