//! Binary model archive.
//!
//! Layout: the line `NPRN1`, the header length in bytes as a decimal line,
//! a JSON header, then every tensor as little-endian `f32`, row-major, in
//! header order. Head counts may differ per layer; shapes are per entry.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &str = "NPRN1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub head_ids: Vec<Vec<usize>>,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for p in model.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += 4 * p.value.len();
    }
    let header = Header {
        config: model.config.clone(),
        head_ids: model.blocks.iter().map(|b| b.attn.head_ids.clone()).collect(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + offset + 32);
    write!(out, "{MAGIC}\n{}\n", json.len())?;
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], what: &str) -> Result<(&'a [u8], &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt(format!("missing newline after {what}")))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let (magic, rest) = take_line(bytes, "magic")?;
    if magic != MAGIC.as_bytes() {
        return Err(corrupt("bad magic, expected NPRN1"));
    }
    let (len, rest) = take_line(rest, "header length")?;
    let len: usize = std::str::from_utf8(len)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("header length is not a decimal integer"))?;
    if rest.len() < len {
        return Err(corrupt(format!("header truncated: {} of {len} bytes", rest.len())));
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| corrupt(format!("header: {e}")))?;
    Ok((header, &rest[len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, payload) = read_header(bytes)?;
    let cfg = &header.config;
    cfg.validate()?;
    if header.head_ids.len() != cfg.layers {
        return Err(corrupt(format!(
            "head_ids lists {} layers, config has {}",
            header.head_ids.len(),
            cfg.layers
        )));
    }
    let mut model = Model::init(cfg)?;
    for (l, ids) in header.head_ids.iter().enumerate() {
        if ids.is_empty() || ids.windows(2).any(|w| w[0] >= w[1]) || ids.iter().any(|&i| i >= cfg.heads) {
            return Err(corrupt(format!("head_ids[{l}] must be nonempty, increasing and below {}", cfg.heads)));
        }
        let drop: Vec<usize> = (0..cfg.heads).filter(|i| !ids.contains(i)).collect();
        model.blocks[l].attn.prune_heads(&drop)?;
    }
    let mut params = model.params_mut();
    if header.tensors.len() != params.len() {
        return Err(corrupt(format!(
            "tensor table has {} entries, model expects {}",
            header.tensors.len(),
            params.len()
        )));
    }
    let mut expected_offset = 0;
    for (entry, p) in header.tensors.iter().zip(params.iter_mut()) {
        let name = &entry.name;
        if *name != p.name {
            return Err(corrupt(format!("tensor `{name}`: expected `{}` at this position", p.name)));
        }
        if entry.shape != p.value.shape() {
            return Err(corrupt(format!(
                "tensor `{name}`: shape {:?}, model expects {:?}",
                entry.shape,
                p.value.shape()
            )));
        }
        if entry.offset != expected_offset {
            return Err(corrupt(format!(
                "tensor `{name}`: offset {} but previous entries end at {expected_offset}",
                entry.offset
            )));
        }
        let n = p.value.len();
        let end = expected_offset + 4 * n;
        let raw = payload
            .get(expected_offset..end)
            .ok_or_else(|| corrupt(format!("tensor `{name}`: payload truncated")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.replace(Tensor::new(entry.shape.clone(), data)?);
        expected_offset = end;
    }
    if payload.len() != expected_offset {
        return Err(corrupt(format!(
            "payload has {} trailing bytes",
            payload.len() - expected_offset
        )));
    }
    drop(params);
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            ffn_dim: 12,
            heads: 4,
            layers: 2,
            vocab: 6,
            max_len: 5,
            n_classes: 3,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_with_ragged_heads() {
        let mut m = Model::init(&tiny()).unwrap();
        m.blocks[1].attn.prune_heads(&[0, 2]).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_entry_is_named() {
        let m = Model::init(&tiny()).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let bad = text.replacen("[6,8]", "[7,8]", 1);
        let err = from_bytes(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("tok_emb"), "{err}");

        let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("cls.b"), "{err}");
        assert!(from_bytes(b"NPRN2\n2\n{}").is_err());
    }
}
