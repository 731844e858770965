//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ADVL"            4 bytes
//! version           u32
//! architecture id   u32 length + UTF-8 bytes
//! temperature       f64
//! repeated until EOF:
//!   name            u32 length + UTF-8 bytes
//!   rank            u32
//!   dims            rank × u32
//!   values          product(dims) × f64, row-major
//! ```
//!
//! Patch files reuse the container with architecture id `PATCH`; the
//! temperature slot is replaced by the target class as a `u32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, ARCHITECTURE_ID};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADVL";
pub const FORMAT_VERSION: u32 = 1;
pub const PATCH_ARCHITECTURE_ID: &str = "PATCH";

#[derive(Debug, Default)]
pub(crate) struct RecordWriter {
    buf: Vec<u8>,
}

impl RecordWriter {
    pub fn new(architecture: &str) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.string(architecture);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) {
        self.string(name);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct RecordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    /// Checks magic, version and architecture id.
    pub fn open(bytes: &'a [u8], architecture: &str) -> Result<Self> {
        let mut r = Self { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: u32::from_be_bytes(*MAGIC),
                found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
            });
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let arch = r.string("architecture id")?;
        if arch != architecture {
            return Err(Error::ArchitectureMismatch {
                expected: architecture.to_string(),
                found: arch,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
    }

    pub fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string("parameter name")?;
        let rank = self.u32("parameter rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Malformed(format!(
                "parameter `{name}` has rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("parameter dims")? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::Malformed(format!("parameter `{name}` has dims {dims:?}")))?;
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Malformed("parameter too large".into()))?,
            "parameter values",
        )?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParameter(name));
        }
        Ok((name, Tensor::new(dims, data)?))
    }
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut w = RecordWriter::new(ARCHITECTURE_ID);
    w.f64(net.temperature());
    for (name, t) in net.named_params() {
        w.tensor(name, t);
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = RecordReader::open(bytes, ARCHITECTURE_ID)?;
    let temperature = r.f64("temperature")?;
    let mut params = Vec::new();
    while !r.at_end() {
        params.push(r.tensor()?);
    }
    Network::from_parts(params, temperature)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode(net))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes via a sibling temp file so a failed run never leaves a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
