//! Binary checkpoint container shared by base snapshots and adapters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MEMOECKP"
//! version      1 byte    FORMAT_VERSION
//! section      1 byte    b'M' (model) or b'A' (adapter)
//! content hash 32 bytes  SHA-256 of the float payload
//! manifest len u64
//! manifest     JSON      {section, config, meta, params: [{name, shape, offset}]}
//! payload      f64 LE arrays in manifest order; offsets are relative to the
//!              payload start, in bytes
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MEMOECKP";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 8 + 1 + 1 + 32 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Model,
    Adapter,
}

impl Section {
    fn tag(self) -> u8 {
        match self {
            Section::Model => b'M',
            Section::Adapter => b'A',
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            b'M' => Ok(Section::Model),
            b'A' => Ok(Section::Adapter),
            other => Err(Error::Checkpoint(format!("unknown section tag {other:#04x}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Section::Model => "model",
            Section::Adapter => "adapter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub section: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub section: Section,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode(
    section: Section,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<Vec<u8>> {
    let mut params = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in tensors {
        params.push(ParamEntry {
            name: (*name).to_owned(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend_from_slice(&t.to_le_bytes());
    }
    let manifest = Manifest {
        section: section.name().to_owned(),
        config,
        meta,
        params,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let hash: [u8; 32] = Sha256::digest(&payload).into();

    let mut out = Vec::with_capacity(HEADER_LEN + manifest_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.push(section.tag());
    out.extend_from_slice(&hash);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    if bytes[8] != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", bytes[8])));
    }
    let section = Section::from_tag(bytes[9])?;
    let hash = &bytes[10..42];
    let mlen = u64::from_le_bytes(bytes[42..50].try_into().unwrap()) as usize;
    let payload_start = HEADER_LEN
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])?;
    if manifest.section != section.name() {
        return Err(Error::Checkpoint(format!(
            "header section `{}` disagrees with manifest `{}`",
            section.name(),
            manifest.section
        )));
    }
    let payload = &bytes[payload_start..];
    let actual: [u8; 32] = Sha256::digest(payload).into();
    if actual.as_slice() != hash {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let end = p.offset + n * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("parameter `{}` overruns payload", p.name)));
        }
        let data = payload[p.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
    }
    Ok(Checkpoint {
        section,
        config: manifest.config,
        meta: manifest.meta,
        tensors,
    })
}
