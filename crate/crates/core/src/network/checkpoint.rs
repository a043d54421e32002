//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `RFRCKPT1`, a little-endian `u64` header length,
//! a JSON header (architecture, pre-training seed, tensor names and shapes),
//! then every tensor's values as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ConvNet, NamedTensor, NetworkParams, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RFRCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    seed: u64,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(theta: &NetworkParams, seed: u64) -> Vec<u8> {
    let header = Header {
        arch: theta.arch.clone(),
        seed,
        tensors: theta
            .params
            .tensors()
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * theta.params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in theta.params.tensors() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint, returning the parameters and the pre-training seed.
pub fn from_bytes(bytes: &[u8]) -> Result<(NetworkParams, u64)> {
    let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let expected = ConvNet::inpainter(&header.arch)?.layout();
    let listed: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if listed != expected {
        return Err(bad("tensor list does not match the architecture"));
    }
    let mut cursor = 16 + hlen;
    let mut tensors = Vec::with_capacity(listed.len());
    for (name, shape) in listed {
        let n: usize = shape.iter().product();
        let raw = bytes.get(cursor..cursor + 8 * n).ok_or_else(|| bad("truncated data"))?;
        cursor += 8 * n;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let params = ParamSet::new(tensors);
    if let Some(name) = params.first_non_finite() {
        return Err(bad(&format!("non-finite values in {name}")));
    }
    Ok((
        NetworkParams {
            arch: header.arch,
            params,
        },
        header.seed,
    ))
}

pub fn save(theta: &NetworkParams, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, to_bytes(theta, seed)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(NetworkParams, u64)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
