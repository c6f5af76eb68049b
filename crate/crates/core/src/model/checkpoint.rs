//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "SCN1" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank × u32 dims | f64 values
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const MAGIC: &[u8; 4] = b"SCN1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 12;

pub fn encode(params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::config(format!("parameter name {} is too long", p.name)))?;
        let rank = u8::try_from(p.tensor.shape().len())
            .map_err(|_| Error::config(format!("parameter {} has too many dims", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in p.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::config("dimension exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated while reading {what}"))),
        }
    }

    fn fail(&self, message: String) -> Error {
        Error::Checkpoint {
            offset: self.pos as u64,
            message,
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let start = r.pos;
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(name_len as usize, "name")?)
            .map_err(|_| Error::Checkpoint {
                offset: start as u64 + 2,
                message: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.saturating_mul(8), "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        store.insert(name, tensor).map_err(|e| Error::Checkpoint {
            offset: start as u64,
            message: e.to_string(),
        })?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
