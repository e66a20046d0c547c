//! Binary tensor container.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of JSON
//!
//! ```text
//! {"version": 1,
//!  "tensors": [{"name": "...", "shape": [..], "dtype": "f32", "offset": <byte offset into body>}, ...],
//!  "quant": {"<layer>": {"bits": 4, "granularity": {...}, "scale": "<tensor name>", "zero_point": "<tensor name>"}},
//!  "meta": {...}}
//! ```
//!
//! followed by the body: every tensor's values as little-endian `f32`, in
//! manifest order. Quantization records point at tensors stored under
//! `quant/<layer>/scale` and `quant/<layer>/zero_point`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{Granularity, QuantParams};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<Entry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    quant: BTreeMap<String, QuantRecord>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantRecord {
    bits: u8,
    granularity: Granularity,
    scale: String,
    zero_point: String,
}

/// Named tensors, optional per-layer quantization parameters and free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub quant: BTreeMap<String, QuantParams>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut all: Vec<(String, &Tensor)> = self.tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
        let mut owned = Vec::new();
        let mut records = BTreeMap::new();
        for (layer, p) in &self.quant {
            let s = format!("quant/{layer}/scale");
            let z = format!("quant/{layer}/zero_point");
            if self.tensors.contains_key(&s) || self.tensors.contains_key(&z) {
                return Err(Error::Checkpoint(format!("tensor name clash for quant layer `{layer}`")));
            }
            owned.push((s.clone(), Tensor::from_parts(vec![p.channels()], p.scale().to_vec())));
            owned.push((
                z.clone(),
                Tensor::from_parts(vec![p.channels()], p.zero_point().iter().map(|&v| v as f32).collect()),
            ));
            records.insert(
                layer.clone(),
                QuantRecord {
                    bits: p.bits(),
                    granularity: p.granularity(),
                    scale: s,
                    zero_point: z,
                },
            );
        }
        all.extend(owned.iter().map(|(k, v)| (k.clone(), v)));

        let mut entries = Vec::with_capacity(all.len());
        let mut offset = 0u64;
        for (name, t) in &all {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            tensors: entries,
            quant: records,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &all {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header_end = 8usize.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let body = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("unsupported dtype `{}`", e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * count;
            if end > body.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` runs past the body", e.name)));
            }
            let data = body[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        let mut quant = BTreeMap::new();
        for (layer, r) in header.quant {
            let s = tensors
                .remove(&r.scale)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{}`", r.scale)))?;
            let z = tensors
                .remove(&r.zero_point)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{}`", r.zero_point)))?;
            let z = z.data().iter().map(|&v| v as i32).collect();
            quant.insert(layer, QuantParams::new(s.into_data(), z, r.bits, r.granularity)?);
        }
        Ok(Self {
            tensors,
            quant,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
