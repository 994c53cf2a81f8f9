//! Flat `key -> (shape, f64 data)` checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  "JTCKPT\0\0"
//! version u32      1
//! meta    u32 length + UTF-8 bytes (free-form, holds the model config)
//! count   u32
//! count × { key: u32 length + UTF-8, ndim: u32, dims: ndim × u64, data: numel × f64 }
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"JTCKPT\0\0";
pub const VERSION: u32 = 1;

pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: TensorMap,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (key, (shape, data)) in &self.tensors {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = r.string(meta_len)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let key_len = r.u32()? as usize;
            let key = r.string(key_len)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(key, (shape, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint entries".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
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
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let mut tensors = BTreeMap::new();
        tensors.insert("a.b".to_string(), (vec![1], vec![1.5]));
        let ck = Checkpoint {
            meta: "m".into(),
            tensors,
        };
        let b = ck.to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[b.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let ck = Checkpoint::default();
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trips(entries in prop::collection::btree_map(
            "[a-z]{1,6}(\\.[a-z0-9_]{1,6}){0,3}",
            prop::collection::vec(-1e6f64..1e6, 1..20),
            0..6,
        ), meta in ".{0,40}") {
            let tensors: TensorMap = entries
                .into_iter()
                .map(|(k, v)| (k, (vec![v.len()], v)))
                .collect();
            let ck = Checkpoint { meta, tensors };
            prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
        }
    }
}
