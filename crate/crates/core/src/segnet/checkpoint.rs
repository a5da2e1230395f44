//! Checkpoint files.
//!
//! Layout: magic `BACKPT1\0`, `u16` LE version, `u32` LE header length, UTF-8
//! JSON header, then every parameter as little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetConfig, SegModel, Sharing};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

pub const MAGIC: &[u8; 8] = b"BACKPT1\0";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetConfig,
    sharing: Sharing,
    iteration: u64,
    seed: u64,
    params: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of the payload relative to the end of the header.
    offset: usize,
    trainable: bool,
}

/// Serializes a model to bytes.
pub fn write_checkpoint<T: Real>(model: &SegModel<T>) -> Result<Vec<u8>> {
    let mut offset = 0;
    let params = model
        .params()
        .iter()
        .map(|p| {
            let e = Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                trainable: p.trainable,
            };
            offset += 4 * p.value.len();
            e
        })
        .collect();
    let header = Header {
        config: model.config().clone(),
        sharing: model.sharing(),
        iteration: model.iteration(),
        seed: model.seed(),
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(14 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<SegModel<f32>> {
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < MAGIC.len() {
        return Err(truncated(MAGIC.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err(format("bad magic bytes".into()));
    }
    if bytes.len() < 14 {
        return Err(truncated(14));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != VERSION {
        return Err(format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let payload_start = 14 + header_len;
    if bytes.len() < payload_start {
        return Err(truncated(payload_start));
    }
    let header: Header = serde_json::from_slice(&bytes[14..payload_start])
        .map_err(|e| format(format!("invalid header: {e}")))?;

    let mut model = SegModel::<f32>::build(header.config.clone(), header.seed)?;
    if header.sharing == Sharing::Unshared {
        model.unshare_and_freeze_source()?;
    }
    if header.params.len() != model.params().len() {
        return Err(Error::shape(
            "load_checkpoint",
            format!(
                "file lists {} parameters, configuration needs {}",
                header.params.len(),
                model.params().len()
            ),
        ));
    }
    let total: usize = header
        .params
        .iter()
        .map(|e| 4 * e.shape.iter().product::<usize>())
        .sum();
    if bytes.len() < payload_start + total {
        return Err(truncated(payload_start + total));
    }
    if bytes.len() > payload_start + total {
        return Err(format(format!(
            "{} trailing bytes after payload",
            bytes.len() - payload_start - total
        )));
    }
    let payload = &bytes[payload_start..];
    for (entry, param) in header.params.iter().zip(model.params_mut()) {
        if entry.name != param.name || entry.shape != param.value.shape() {
            return Err(Error::shape(
                "load_checkpoint",
                format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    entry.name,
                    entry.shape,
                    param.name,
                    param.value.shape()
                ),
            ));
        }
        let n = param.value.len();
        let end = entry.offset + 4 * n;
        if end > payload.len() {
            return Err(truncated(payload_start + end));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        param.value = Grid::new(entry.shape.as_slice(), data)?;
        param.trainable = entry.trainable;
    }
    model.set_iteration(header.iteration);
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &SegModel<T>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, optionally requiring its network configuration.
pub fn load_checkpoint(path: &Path, expected: Option<&NetConfig>) -> Result<SegModel<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = read_checkpoint(&bytes, path)?;
    if let Some(expected) = expected {
        if model.config() != expected {
            return Err(Error::Config(format!(
                "checkpoint {} was built with {:?}, expected {:?}",
                path.display(),
                model.config(),
                expected
            )));
        }
    }
    Ok(model)
}
