//! Binary model checkpoints.
//!
//! Layout: 4-byte magic `DILC`, u32 format version, u64 header length, a
//! JSON header (architecture, vocabulary, layout, bank metadata and a tensor
//! index with shapes and SHA-256 digests), then every tensor as 32-bit
//! little-endian floats in index order. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DilError, Result};
use crate::model::{class_map, ArchConfig, DilModel, DomainBank, DomainSpec, ParamRef};
use crate::nn::{BnParams, LinearParams};
use crate::strategy::Layout;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DILC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Hex SHA-256 of the tensor's payload bytes.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub arch: ArchConfig,
    pub vocabulary: Vec<String>,
    pub layout: Layout,
    pub banks: Vec<DomainSpec>,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> DilError {
    DilError::Checkpoint(msg.into())
}

fn payload(t: &Tensor<impl Real>) -> Vec<u8> {
    t.data()
        .iter()
        .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
        .collect()
}

/// Serializes a model. f64 models are stored at 32-bit precision.
pub fn to_bytes<T: Real>(model: &DilModel<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut body = Vec::new();
    for (name, t) in model.named_tensors() {
        let bytes = payload(t);
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        body.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        arch: model.arch.clone(),
        vocabulary: model.vocabulary.clone(),
        layout: model.layout,
        banks: model.banks.iter().map(|b| b.spec.clone()).collect(),
        tensors,
    };
    let json =
        serde_json::to_vec(&header).map_err(|e| corrupt(format!("cannot encode header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + body.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    Ok(out)
}

/// Parses a checkpoint, verifying every tensor digest.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<DilModel<T>> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| corrupt(format!("malformed header: {e}")))?;
    if header.version != version {
        return Err(corrupt("header version disagrees with the preamble"));
    }
    let mut model = skeleton::<T>(&header)?;
    let expected: Vec<String> = model.param_refs().iter().map(|r| r.to_string()).collect();
    let listed: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
    if expected != listed {
        return Err(corrupt("tensor index does not match the architecture"));
    }
    let mut at = header_end;
    for entry in &header.tensors {
        let r = ParamRef::parse(&entry.name).ok_or_else(|| corrupt("unknown tensor name"))?;
        let slot = model
            .param_mut(r)
            .expect("skeleton has every listed tensor");
        if slot.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "tensor {} has shape {:?}, architecture expects {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        let len = 4 * slot.numel();
        let end = at
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("payload of {} is truncated", entry.name)))?;
        let chunk = &bytes[at..end];
        if hex::encode(Sha256::digest(chunk)) != entry.sha256 {
            return Err(corrupt(format!(
                "digest mismatch for tensor {}",
                entry.name
            )));
        }
        let data: Vec<T> = chunk
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        *slot = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| corrupt(format!("tensor {}: {e}", entry.name)))?;
        at = end;
    }
    if at != bytes.len() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    Ok(model)
}

/// A model with the header's structure and zero-filled tensors.
fn skeleton<T: Real>(header: &CheckpointHeader) -> Result<DilModel<T>> {
    let bad = |e: DilError| corrupt(format!("invalid metadata: {e}"));
    header.arch.validate().map_err(bad)?;
    let base = header
        .banks
        .first()
        .ok_or_else(|| corrupt("checkpoint has no banks"))?;
    let convs = header.arch.conv_channels();
    let dim = header.arch.feature_dim();
    let mut banks = Vec::with_capacity(header.banks.len());
    for (i, spec) in header.banks.iter().enumerate() {
        spec.validate(&header.vocabulary).map_err(bad)?;
        if spec.domain_id != i {
            return Err(corrupt(format!(
                "bank {i} carries domain_id {}",
                spec.domain_id
            )));
        }
        banks.push(DomainBank {
            spec: spec.clone(),
            bn: convs.iter().map(|&(_, o)| BnParams::new(o)).collect(),
            head: LinearParams::zeros(dim, spec.class_list.len()),
            class_map: class_map(base, spec),
        });
    }
    Ok(DilModel {
        arch: header.arch.clone(),
        vocabulary: header.vocabulary.clone(),
        convs: convs
            .iter()
            .map(|&(i, o)| {
                Tensor::zeros(vec![
                    o,
                    i,
                    crate::model::KERNEL_SIZE,
                    crate::model::KERNEL_SIZE,
                ])
            })
            .collect(),
        base_head: LinearParams::zeros(dim, base.class_list.len()),
        banks,
        layout: header.layout,
    })
}

pub fn save<T: Real>(model: &DilModel<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DilError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| DilError::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<DilModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| DilError::io(path, e))?;
    from_bytes(&bytes)
}

/// Header of a checkpoint without decoding tensors.
pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = n
        .checked_add(16)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    serde_json::from_slice(&bytes[16..end]).map_err(|e| corrupt(format!("malformed header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, TaskKind};

    fn model() -> DilModel {
        let vocab: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let spec = |id: usize, classes: &[&str]| DomainSpec {
            domain_id: id,
            name: format!("d{id}"),
            class_list: classes.iter().map(|s| s.to_string()).collect(),
            task_kind: TaskKind::SingleLabel,
        };
        let arch = ArchConfig {
            channels: vec![4, 8],
            convs_per_block: 1,
            mel_bins: 8,
            frames: 8,
        };
        let mut m: DilModel = build_model(&arch, &vocab, &spec(0, &["a", "b"]), 3).unwrap();
        m.add_domain(spec(1, &["b", "c"])).unwrap();
        m.banks[1].head.weight.data_mut()[3] = 0.25;
        m.banks[1].bn[0].running_var.data_mut()[1] = 2.5;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let back: DilModel = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn tampered_payload_fails_the_digest() {
        let mut bytes = to_bytes(&model()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        let err = from_bytes::<f32>(&bytes).unwrap_err();
        assert!(matches!(err, DilError::Checkpoint(ref m) if m.contains("digest")));
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4]).is_err());
        assert!(from_bytes::<f32>(b"nope").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes::<f32>(&extra).is_err());
    }

    #[test]
    fn f64_models_load_at_either_precision() {
        let m: DilModel<f64> = model().cast();
        let bytes = to_bytes(&m).unwrap();
        let back: DilModel<f64> = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let narrow: DilModel<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(narrow, model());
    }
}
