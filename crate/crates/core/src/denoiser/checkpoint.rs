//! Binary checkpoint: `PEPD` magic, u32 version, u64 length-prefixed JSON
//! header, then little-endian f32 tensor payloads in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, DenoiserModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::trainer::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PEPD";
pub const CHECKPOINT_VERSION: u32 = 1;

// Header JSON larger than this is treated as corruption.
const MAX_HEADER_BYTES: u64 = 1 << 30;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DenoiserConfig,
    tensors: Vec<TensorEntry>,
    norm_stats: NormStats,
    epochs_completed: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::CheckpointFormat(msg.into())
}

pub fn write_checkpoint<W: Write>(model: &DenoiserModel, mut w: W) -> Result<()> {
    let mut offset = 0u64;
    let tensors = model
        .params
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        tensors,
        norm_stats: model.norm_stats.clone(),
        epochs_completed: model.epochs_completed,
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for t in model.params.values() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err(format!("truncated {what}")),
        _ => Error::io("<checkpoint>", e),
    })
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<DenoiserModel> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut len = [0u8; 8];
    read_exact(&mut r, &mut len, "header length")?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(format_err(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    read_exact(&mut r, &mut json, "header")?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| format_err(format!("header: {e}")))?;

    header.config.validate()?;
    header
        .norm_stats
        .validate(header.config.d_emb)
        .map_err(|e| format_err(e.to_string()))?;

    let expected = header.config.parameter_layout();
    if expected.len() != header.tensors.len() {
        return Err(format_err(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }

    let mut params = IndexMap::with_capacity(expected.len());
    let mut offset = 0u64;
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(format_err(format!(
                "tensor {:?} {:?} does not match architecture ({name:?} {shape:?})",
                entry.name, entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(format_err(format!("tensor {name:?} has offset {}", entry.offset)));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        read_exact(&mut r, &mut bytes, &format!("payload of {name:?}"))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(format_err(format!("tensor {name:?} has non-finite values")));
        }
        params.insert(name.clone(), Tensor::new(shape.clone(), data)?);
        offset += 4 * n as u64;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
        return Err(format_err("trailing bytes after payload"));
    }

    Ok(DenoiserModel {
        config: header.config,
        params,
        norm_stats: header.norm_stats,
        epochs_completed: header.epochs_completed,
    })
}

pub fn save_checkpoint(model: &DenoiserModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
