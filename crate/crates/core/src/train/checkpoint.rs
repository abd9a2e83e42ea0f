//! Binary checkpoint format.
//!
//! ```text
//! magic "DCMBERT1"          8 bytes
//! format version            u32 LE
//! manifest length           u32 LE
//! manifest                  UTF-8 JSON: config, tensor table, metadata
//! payload                   f32 LE, tensors in canonical order
//! digest                    u64 LE, first 8 bytes of SHA-256 of all preceding bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DCMBERT1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const DIGEST_LEN: usize = 8;

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub step: u64,
    pub seed: u64,
    /// Last few logged totals.
    pub loss_tail: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: TrainingMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub model: EncoderModel,
    pub tensors: Vec<TensorEntry>,
    pub meta: TrainingMeta,
    pub digest: u64,
}

/// First 8 bytes of SHA-256, little-endian.
pub fn digest64(bytes: &[u8]) -> u64 {
    let hash = Sha256::digest(bytes);
    u64::from_le_bytes(hash[..8].try_into().expect("sha256 is 32 bytes"))
}

pub fn encode_checkpoint(model: &EncoderModel, meta: &TrainingMeta) -> Result<Vec<u8>> {
    model.verify_layout()?;
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    model.visit(&mut |name, t| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    });
    let manifest = Manifest {
        config: model.config.clone(),
        tensors,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.leaves() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = digest64(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

fn integrity(offset: usize, reason: impl Into<String>) -> Error {
    Error::Integrity {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(integrity(0, "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(integrity(bytes.len(), "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let manifest_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload_start = HEADER_LEN + manifest_len;
    if bytes.len() < payload_start {
        return Err(integrity(bytes.len(), "truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
        .map_err(|e| integrity(HEADER_LEN + e.column().saturating_sub(1), format!("manifest: {e}")))?;

    let reference = EncoderModel::zeros(&manifest.config)?;
    let names = reference.names();
    let shapes: Vec<&[usize]> = reference.leaves().iter().map(|t| t.shape()).collect();
    if manifest.tensors.len() != names.len() {
        return Err(integrity(
            HEADER_LEN,
            format!(
                "manifest lists {} tensors, config implies {}",
                manifest.tensors.len(),
                names.len()
            ),
        ));
    }
    let mut expected_offset = 0u64;
    for (entry, (name, shape)) in manifest.tensors.iter().zip(names.iter().zip(&shapes)) {
        if &entry.name != name || entry.shape.as_slice() != *shape {
            return Err(integrity(
                HEADER_LEN,
                format!("tensor {} {:?} does not match layout {name} {shape:?}", entry.name, entry.shape),
            ));
        }
        if entry.offset != expected_offset {
            return Err(integrity(
                HEADER_LEN,
                format!("tensor {name} at payload offset {}, expected {expected_offset}", entry.offset),
            ));
        }
        expected_offset += 4 * shape.iter().product::<usize>() as u64;
    }
    let payload_len = expected_offset as usize;
    let total = payload_start + payload_len + DIGEST_LEN;
    if bytes.len() < total {
        return Err(integrity(bytes.len(), format!("truncated: expected {total} bytes")));
    }
    if bytes.len() > total {
        return Err(integrity(total, "trailing bytes after digest"));
    }
    let digest_at = payload_start + payload_len;
    let stored = u64::from_le_bytes(bytes[digest_at..].try_into().unwrap());
    let computed = digest64(&bytes[..digest_at]);
    if stored != computed {
        return Err(integrity(digest_at, format!("digest mismatch: stored {stored:016x}, computed {computed:016x}")));
    }

    let payload = &bytes[payload_start..digest_at];
    let mut tensors = manifest.tensors.iter();
    let model = reference.map(&mut |_, t: &Tensor| {
        let entry = tensors.next().expect("length checked");
        let start = entry.offset as usize;
        let data = payload[start..start + 4 * t.len()]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(t.shape(), data).expect("shape checked")
    });
    model.verify_layout()?;
    if let Some((i, _)) = model
        .leaves()
        .iter()
        .enumerate()
        .find(|(_, t)| !t.is_finite())
    {
        let at = payload_start + manifest.tensors[i].offset as usize;
        return Err(integrity(at, format!("non-finite values in {}", manifest.tensors[i].name)));
    }
    Ok(Checkpoint {
        version,
        model,
        tensors: manifest.tensors,
        meta: manifest.meta,
        digest: stored,
    })
}

/// Writes a checkpoint and returns its digest.
pub fn save_checkpoint(model: &EncoderModel, meta: &TrainingMeta, path: &Path) -> Result<u64> {
    let bytes = encode_checkpoint(model, meta)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(bytes[bytes.len() - DIGEST_LEN..].try_into().unwrap()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
