//! Binary tensor container shared by backbone weights and prompt banks.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "SPTW\0" | version | n_layers d_model n_heads vocab_size max_positions head_tied
//! { name_len | name bytes | rank | dims × rank | f32 LE payload } *   (sorted by name)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SPTW\0";
pub const VERSION: u32 = 1;
pub const CONFIG_FIELDS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: [u32; CONFIG_FIELDS],
    pub records: BTreeMap<String, Record>,
}

impl Container {
    pub fn new(config: [u32; CONFIG_FIELDS]) -> Self {
        Self { config, records: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) {
        self.records.insert(name.into(), Record { dims, values });
    }

    pub fn take(&mut self, name: &str) -> Result<Record> {
        self.records.remove(name).ok_or_else(|| Error::Format(format!("missing record `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in self.config {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, rec) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(rec.dims.len() as u32).to_le_bytes());
            for &d in &rec.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &rec.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic, not an SPTW container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let mut config = [0u32; CONFIG_FIELDS];
        for c in &mut config {
            *c = r.u32()?;
        }
        let mut records = BTreeMap::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("oversized record".into()))?)?;
            let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if records.insert(name.clone(), Record { dims, values }).is_some() {
                return Err(Error::Format(format!("duplicate record `{name}`")));
            }
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated container: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Stores UTF-8 text as one f32 per byte (exact for 0..=255).
pub fn text_record(text: &str) -> Record {
    Record { dims: vec![text.len()], values: text.bytes().map(f32::from).collect() }
}

pub fn record_text(rec: &Record) -> Result<String> {
    let bytes = rec
        .values
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format("text record holds a non-byte value".into()))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Format("text record is not UTF-8".into()))
}
