//! Little-endian binary helpers and the parameter checkpoint container.
//!
//! Checkpoint layout:
//!
//! ```text
//! "UNCM" | version u8 | section tag u8
//! u32 n_entries, then per entry: u16 len + key bytes, u16 len + value bytes
//! u32 n_tensors, then per tensor:
//!     u16 len + name bytes | u8 ndim | u32 extent * ndim | f64 * product(extents)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UNCM";
pub const CHECKPOINT_VERSION: u8 = 1;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{what}: invalid UTF-8")))
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let n: u16 = s
        .len()
        .try_into()
        .map_err(|_| Error::invalid(format!("string of {} bytes too long to encode", s.len())))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionTag {
    Decoder = 1,
    Controller = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: SectionTag,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(self.tag as u8);
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        for (k, v) in &self.config {
            put_string(&mut out, k)?;
            put_string(&mut out, v)?;
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_string(&mut out, name)?;
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u8("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
        }
        let tag = match r.u8("section tag")? {
            1 => SectionTag::Decoder,
            2 => SectionTag::Controller,
            other => return Err(Error::Format(format!("unknown section tag {other}"))),
        };
        let n_cfg = r.u32("config block")? as usize;
        let mut config = Vec::with_capacity(n_cfg.min(1024));
        for _ in 0..n_cfg {
            let k = r.string("config key")?;
            let v = r.string("config value")?;
            config.push((k, v));
        }
        let n_tensors = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let name = r.string("tensor name")?;
            let ndim = r.u8("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("tensor shape")? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.f64s(n, "tensor data")?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.remaining())));
        }
        Ok(Self { tag, config, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint config lacks `{key}`")))
    }

    pub fn config_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.config_value(key)?;
        raw.parse().map_err(|_| Error::Format(format!("checkpoint config `{key}` = `{raw}` is malformed")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }
}
