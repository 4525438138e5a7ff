//! Binary checkpoint format.
//!
//! ```text
//! magic   "CNNAV1\0"                     7 bytes
//! count   u64 LE
//! record  name_len u64 LE | name UTF-8 | rank u64 LE | dims u64 LE * rank | data f32 LE * prod(dims)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 7] = b"CNNAV1\0";

pub fn encode(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            kind: "checkpoint",
            detail: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format {
            kind: "checkpoint",
            detail: format!("length {v} overflows"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format {
            kind: "checkpoint",
            detail: "bad magic".into(),
        });
    }
    let count = r.usize()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format {
                kind: "checkpoint",
                detail: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.usize()?;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Format {
            kind: "checkpoint",
            detail: format!("{name}: dims overflow"),
        })?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format {
            kind: "checkpoint",
            detail: format!("{name}: size overflow"),
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format {
            kind: "checkpoint",
            detail: format!("{name}: {e}"),
        })?;
        records.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            kind: "checkpoint",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(records)
}

pub fn save<T: Element>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(&store.to_records())).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
