//! DTF1 binary tensors and the named-record container built on them.
//!
//! A DTF1 record is
//!
//! ```text
//! b"DTF1" | order: u32 LE | extents: order x u64 LE | values: f64 LE, row-major
//! ```
//!
//! A container stores a JSON manifest followed by DTF1 records in manifest
//! order:
//!
//! ```text
//! b"DTFC" | version: u32 LE (= 1) | manifest_len: u64 LE | manifest (UTF-8 JSON) | record*
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Result};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"DTF1";
pub const CONTAINER_MAGIC: &[u8; 4] = b"DTFC";
pub const CONTAINER_VERSION: u32 = 1;

/// Appends one DTF1 record to `out`.
pub fn encode_into(t: &DenseTensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.order() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.order() + 8 * t.len());
    encode_into(t, &mut out);
    out
}

/// Byte cursor that reports absolute offsets in its errors.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<DenseTensor> {
        let start = self.pos as u64;
        if self.take(4, "magic")? != MAGIC {
            return Err(format_err(start, "bad magic, expected DTF1"));
        }
        let order = self.u32("order")? as usize;
        if order == 0 {
            return Err(format_err(start + 4, "tensor order must be at least 1"));
        }
        let mut shape = Vec::with_capacity(order.min(64));
        let mut numel: usize = 1;
        for i in 0..order {
            let off = self.pos as u64;
            let e = self.u64("extent")?;
            if e == 0 {
                return Err(format_err(off, format!("extent {i} is zero")));
            }
            let e = usize::try_from(e)
                .map_err(|_| format_err(off, format!("extent {i} does not fit in memory")))?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| format_err(off, "element count overflows"))?;
            shape.push(e);
        }
        let bytes = numel
            .checked_mul(8)
            .ok_or_else(|| format_err(self.pos as u64, "payload size overflows"))?;
        let payload = self.take(bytes, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DenseTensor::new(shape, data).map_err(|e| format_err(start, e.to_string()))
    }
}

/// Decodes exactly one DTF1 record; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<DenseTensor> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let t = c.record()?;
    if c.pos != bytes.len() {
        return Err(format_err(c.pos as u64, "trailing bytes after record"));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    decode(&std::fs::read(path)?)
}

/// One named entry of a container manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// What the container holds, e.g. `"wander-checkpoint"` or `"dataset"`.
    pub kind: String,
    pub records: Vec<RecordEntry>,
    /// Free-form configuration echo.
    pub config: serde_json::Value,
}

/// Named tensors plus a configuration echo.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: serde_json::Value,
    pub records: Vec<(String, DenseTensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: DenseTensor) {
        self.records.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&DenseTensor> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| invalid(format!("container has no record named {name:?}")))
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            kind: self.kind.clone(),
            records: self
                .records
                .iter()
                .map(|(name, t)| RecordEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            config: self.config.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.records {
            encode_into(t, &mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(4, "container magic")? != CONTAINER_MAGIC {
            return Err(format_err(0, "bad magic, expected DTFC"));
        }
        let version = c.u32("container version")?;
        if version != CONTAINER_VERSION {
            return Err(format_err(4, format!("unsupported container version {version}")));
        }
        let len_off = c.pos as u64;
        let len = usize::try_from(c.u64("manifest length")?)
            .map_err(|_| format_err(len_off, "manifest length does not fit in memory"))?;
        let man_off = c.pos as u64;
        let manifest: Manifest = serde_json::from_slice(c.take(len, "manifest")?)
            .map_err(|e| format_err(man_off, format!("manifest: {e}")))?;
        let mut records = Vec::with_capacity(manifest.records.len());
        for entry in manifest.records {
            let off = c.pos as u64;
            let t = c.record()?;
            if t.shape() != entry.shape.as_slice() {
                return Err(format_err(
                    off,
                    format!(
                        "record {:?} has shape {:?}, manifest says {:?}",
                        entry.name,
                        t.shape(),
                        entry.shape
                    ),
                ));
            }
            records.push((entry.name, t));
        }
        if c.pos != bytes.len() {
            return Err(format_err(c.pos as u64, "trailing bytes after last record"));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            records,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
