//! Binary checkpoint format.
//!
//! ```text
//! "MMOE" | version: u32 LE | header_len: u64 LE | header: UTF-8 JSON
//! zero padding to a 64-byte boundary
//! f32 LE payloads in index order, each starting on a 64-byte boundary
//! ```
//!
//! Tensor offsets in the header are relative to the first payload byte.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticTask;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::schedule::StrategyConfig;

pub const MAGIC: &[u8; 4] = b"MMOE";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub strategy: Option<StrategyConfig>,
    pub step: u64,
    pub task: Option<SyntheticTask>,
    /// Training sequence length.
    pub seq_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub tensors: IndexMap<String, TensorEntry>,
}

fn align(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Serializes parameters and metadata into the checkpoint layout.
pub fn to_bytes(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = IndexMap::new();
    let mut offset = 0usize;
    for p in model.params.iter() {
        tensors.insert(
            p.name.clone(),
            TensorEntry {
                shape: p.value.shape().to_vec(),
                offset: offset as u64,
            },
        );
        offset = align(offset + 4 * p.value.len());
    }
    let header = Header {
        model: model.config.clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let start = align(PREAMBLE + json.len());
    let mut out = Vec::with_capacity(start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (p, entry) in model.params.iter().zip(header.tensors.values()) {
        out.resize(start + entry.offset as usize, 0);
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(start + offset, 0);
    Ok(out)
}

/// Parses a checkpoint, validating every tensor against the architecture
/// declared in its header.
pub fn from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    if bytes.len() < PREAMBLE {
        return Err(format_err("file too short for a checkpoint preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version} (expected {VERSION})")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])?;
    let start = align(header_end);
    let mut model = Model::zeroed(&header.model)?;
    if header.tensors.len() != model.params.len() {
        return Err(format_err(format!(
            "header lists {} tensors, architecture has {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        let entry = header
            .tensors
            .get(&p.name)
            .ok_or_else(|| format_err(format!("missing tensor {}", p.name)))?;
        if entry.shape != p.value.shape() {
            return Err(Error::Shape {
                op: "load_checkpoint",
                lhs: entry.shape.clone(),
                rhs: p.value.shape().to_vec(),
            });
        }
        let from = start + entry.offset as usize;
        let to = from + 4 * p.value.len();
        if to > bytes.len() {
            return Err(format_err(format!("truncated payload for {}", p.name)));
        }
        for (dst, chunk) in p.value.data_mut().iter_mut().zip(bytes[from..to].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?)
}

/// Header only, without touching the payloads.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(format_err("not a checkpoint"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = PREAMBLE.saturating_add(len).min(bytes.len());
    Ok(serde_json::from_slice(&bytes[PREAMBLE..end])?)
}
