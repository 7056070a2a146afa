//! Binary checkpoint container for named parameter arrays.
//!
//! ```text
//! offset  bytes  field
//! 0       8      magic "SEPKCKPT"
//! 8       4      format version, u32 LE (currently 1)
//! 12      4      header length H, u32 LE
//! 16      H      header: UTF-8 JSON (model config fingerprint and metadata)
//! 16+H    4      tensor count N, u32 LE
//! then N records:
//!         4      name length L, u32 LE
//!         L      name, UTF-8
//!         1      dtype: 0 = f32 LE, 1 = f64 LE
//!         1      rank R
//!         4*R    dims, u32 LE each
//!         n*w    values, little-endian, row-major (w = 4 or 8)
//! ```
//!
//! Records appear in the store's iteration order, so encoding is
//! deterministic and `encode(decode(bytes)) == bytes`.

use std::path::Path;

use super::params::{Array, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SEPKCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub dtype: DType,
    pub params: ParamStore,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(header: impl Into<String>, params: ParamStore) -> Self {
        Self { header: header.into(), dtype: DType::F64, params }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, arr) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(self.dtype.tag());
            out.push(arr.shape.len() as u8);
            for &d in &arr.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match self.dtype {
                DType::F32 => arr.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
                DType::F64 => arr.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(fmt_err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = String::from_utf8(r.take(hlen)?.to_vec()).map_err(|_| fmt_err("header is not UTF-8"))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut dtype = DType::F64;
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| fmt_err("name is not UTF-8"))?;
            dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(fmt_err(format!("unknown dtype tag {t} for `{name}`"))),
            };
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                DType::F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => {
                    r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
                }
            };
            params.insert(name, Array { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(fmt_err("trailing bytes after last tensor"));
        }
        Ok(Self { header, dtype, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| fmt_err("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Array { shape: vec![2, 3], data: vec![0.1, -0.2, 0.3, 1e-9, 5.5, -7.25] });
        p.insert("b", Array { shape: vec![3], data: vec![0.0, 1.0, 2.0] });
        p
    }

    #[test]
    fn f32_layout_is_documented_size() {
        let mut ck = Checkpoint::new("{}", sample());
        ck.dtype = DType::F32;
        let bytes = ck.encode();
        let expected = 8 + 4 + 4 + 2 + 4 + (4 + 1 + 1 + 1 + 8 + 24) + (4 + 1 + 1 + 1 + 4 + 12);
        assert_eq!(bytes.len(), expected);
        assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let ck = Checkpoint::new(r#"{"model":"toy"}"#, sample());
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(Checkpoint::decode(b"nope"), Err(Error::Format(_))));
        let mut bytes = Checkpoint::new("{}", sample()).encode();
        bytes.pop();
        assert!(Checkpoint::decode(&bytes).is_err());
    }
}
