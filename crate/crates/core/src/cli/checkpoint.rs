//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PARTCKPT"  u32 version  u32 header_len  header (JSON)  f32 values...  sha256[32]
//! ```
//!
//! The header holds the model config, provenance and a tensor directory
//! (name, group, shape, offset into the value block). The trailing SHA-256
//! covers every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SlmModel};
use crate::numerics::{Group, Tensor};

pub const MAGIC: &[u8; 8] = b"PARTCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub recipe: String,
    /// Completed stage name, or `foundation` / `init`.
    pub stage: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    /// Offset in values (not bytes) into the value block.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

pub fn encode(model: &SlmModel, provenance: &Provenance) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name().to_string(),
            group: p.group(),
            shape: p.tensor.shape().to_vec(),
            offset,
        });
        offset += p.tensor.numel();
    }
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        provenance: provenance.clone(),
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * offset + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in model.params.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(SlmModel, Provenance)> {
    let corrupt = |reason: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 16 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("missing PARTCKPT magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("content digest mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let values = body
        .get(16 + header_len..)
        .ok_or_else(|| corrupt("header runs past end of file"))?;
    let header: Header =
        serde_json::from_slice(&body[16..16 + header_len]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if values.len() % 4 != 0 {
        return Err(corrupt("value block is not a whole number of f32"));
    }
    let floats: Vec<f32> = values
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = SlmModel::new(header.model.clone(), 0).map_err(|e| corrupt(&e.to_string()))?;
    let mut loaded = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let data = floats
            .get(t.offset..t.offset + n)
            .ok_or_else(|| corrupt(&format!("tensor `{}` out of bounds", t.name)))?;
        let id = model
            .params
            .id(&t.name)
            .ok_or_else(|| corrupt(&format!("unknown tensor `{}`", t.name)))?;
        if model.params.get(id).group() != t.group {
            return Err(corrupt(&format!("tensor `{}` has the wrong group", t.name)));
        }
        loaded.push((t.name.clone(), Tensor::new(t.shape.clone(), data.to_vec())?));
    }
    let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if expected != floats.len() {
        return Err(corrupt("value block length does not match the tensor directory"));
    }
    model.load_values(&loaded).map_err(|e| corrupt(&e.to_string()))?;
    Ok((model, header.provenance))
}

pub fn save(model: &SlmModel, provenance: &Provenance, path: &Path) -> Result<()> {
    fs::write(path, encode(model, provenance)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<(SlmModel, Provenance)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (SlmModel, Provenance) {
        let m = SlmModel::new(ModelConfig::default(), 4).unwrap();
        let p = Provenance {
            recipe: "part".into(),
            stage: "stage2".into(),
            seed: 4,
        };
        (m, p)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (m, p) = sample();
        let bytes = encode(&m, &p);
        let (back, prov) = decode(&bytes, Path::new("mem")).unwrap();
        assert!(back.params.bit_eq(&m.params));
        assert_eq!(back.config, m.config);
        assert_eq!(prov, p);
        assert_eq!(encode(&back, &prov), bytes);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let (m, p) = sample();
        let bytes = encode(&m, &p);
        for pos in [0, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(
                decode(&bad, Path::new("mem")),
                Err(Error::CorruptCheckpoint { .. })
            ));
        }
    }

    #[test]
    fn truncation_is_detected() {
        let (m, p) = sample();
        let bytes = encode(&m, &p);
        for len in [0, 7, 40, bytes.len() - 1] {
            assert!(matches!(
                decode(&bytes[..len], Path::new("mem")),
                Err(Error::CorruptCheckpoint { .. })
            ));
        }
    }
}
