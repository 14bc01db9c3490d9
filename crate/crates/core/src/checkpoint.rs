//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "M2PT" | version u32 | count u32
//! count x { name_len u32 | name utf-8 | dtype u8 (0 = f32) | rank u32 | dims u64.. | payload f32.. }
//! echo_len u64 | echo utf-8
//! ```
//!
//! Entries are written in name order, so equal parameter sets always encode
//! to equal bytes.

use std::path::Path;

use m2pt_tensor::{ParamStore, Tensor};

use crate::pipeline::{declared_shapes, Architecture};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"M2PT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    /// Configuration the parameters were produced under.
    pub echo: String,
}

pub fn encode(params: &ParamStore<f32>, echo: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * params.numel() + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(echo.len() as u64).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} does not fit in memory")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format(format!("{what} is not utf-8")))
    }
}

/// Parses a whole checkpoint; nothing is returned unless every byte checks out.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("version {version}, expected {VERSION}")));
    }
    let count = r.u32("entry count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let name = r.utf8(n, "tensor name")?;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("`{name}` has unknown dtype {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::Format(format!("`{name}` shape {shape:?} overflows")))?;
        let data = r
            .take(4 * numel, &format!("payload of `{name}`"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        if params.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
    }
    let n = r.len("echo length")?;
    let echo = r.utf8(n, "config echo")?;
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint { params, echo })
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, echo: &str) -> Result<()> {
    std::fs::write(path, encode(params, echo)).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint without checking it against any configuration.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a checkpoint and checks that it holds exactly the tensors `arch`
/// declares, with matching shapes.
pub fn load_checkpoint(path: &Path, arch: &Architecture) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path)?;
    check_shapes(&ckpt.params, arch)?;
    Ok(ckpt)
}

pub fn check_shapes(params: &ParamStore<f32>, arch: &Architecture) -> Result<()> {
    let expected = declared_shapes(arch);
    for (name, t) in params.iter() {
        match expected.get(name) {
            None => return Err(Error::config(name, "tensor is not part of the configured model")),
            Some(shape) if shape.as_slice() != t.shape() => {
                return Err(Error::config(
                    name,
                    format!("checkpoint shape {:?}, configured shape {shape:?}", t.shape()),
                ))
            }
            _ => {}
        }
    }
    if let Some(missing) = expected.keys().find(|n| !params.contains(n)) {
        return Err(Error::config(missing.as_str(), "tensor missing from checkpoint"));
    }
    Ok(())
}
