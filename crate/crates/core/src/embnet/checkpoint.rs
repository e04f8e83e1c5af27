//! Checkpoint layout:
//!
//! ```text
//! "EMBN" | version: u32 LE | manifest_len: u32 LE | manifest (UTF-8 JSON)
//!        | f32 LE arrays in manifest order | CRC-32 of all preceding bytes: u32 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{LayerParams, Tensor};

use super::{build_model, ArchConfig, Model, ModelError, TrainingMeta};

pub const MAGIC: &[u8; 4] = b"EMBN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: String,
    array: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    arch: ArchConfig,
    training_meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

/// Serializes a model to checkpoint bytes.
pub fn write_model(model: &Model<f32>) -> Vec<u8> {
    let manifest = Manifest {
        arch: model.arch.clone(),
        training_meta: model.meta.clone(),
        tensors: model
            .layers
            .iter()
            .flat_map(|l| {
                l.arrays.iter().map(|(k, t)| TensorEntry {
                    layer: l.name.clone(),
                    array: k.clone(),
                    shape: t.shape().to_vec(),
                })
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.layers.iter().flat_map(|l| &l.arrays) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses checkpoint bytes. The version is checked before the checksum so
/// files from other format versions are reported as such.
pub fn read_model(bytes: &[u8]) -> Result<Model<f32>, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        if bytes.len() < 4 && MAGIC.starts_with(bytes) {
            return Err(ModelError::ChecksumMismatch);
        }
        return Err(ModelError::InvalidFormat("missing EMBN magic".into()));
    }
    if bytes.len() < 8 {
        return Err(ModelError::ChecksumMismatch);
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(ModelError::FormatVersionMismatch(version));
    }
    if bytes.len() < 16 {
        return Err(ModelError::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32_at(tail, 0) {
        return Err(ModelError::ChecksumMismatch);
    }
    let manifest_len = u32_at(body, 8) as usize;
    let json = body
        .get(12..12 + manifest_len)
        .ok_or_else(|| ModelError::InvalidFormat("manifest length exceeds file".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)
        .map_err(|e| ModelError::InvalidFormat(format!("manifest: {e}")))?;

    // the skeleton fixes layer order, array keys and shapes for this arch
    let mut model: Model<f32> = build_model(&manifest.arch, 0)?;
    model.meta = manifest.training_meta;
    let expected: Vec<(&LayerParams<f32>, &String, &Tensor<f32>)> = model
        .layers
        .iter()
        .flat_map(|l| l.arrays.iter().map(move |(k, t)| (l, k, t)))
        .collect();
    if expected.len() != manifest.tensors.len() {
        return Err(ModelError::InvalidFormat(format!(
            "{} tensors in manifest, architecture needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for ((layer, key, t), entry) in expected.iter().zip(&manifest.tensors) {
        if layer.name != entry.layer || **key != entry.array || t.shape() != entry.shape.as_slice() {
            return Err(ModelError::InvalidFormat(format!(
                "tensor {}.{} {:?} does not match architecture ({}.{} {:?})",
                entry.layer,
                entry.array,
                entry.shape,
                layer.name,
                key,
                t.shape()
            )));
        }
    }
    let mut cursor = 12 + manifest_len;
    let total: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if body.len() - cursor != total * 4 {
        return Err(ModelError::InvalidFormat(format!(
            "expected {} array bytes, found {}",
            total * 4,
            body.len() - cursor
        )));
    }
    for layer in &mut model.layers {
        for (_, t) in &mut layer.arrays {
            for v in t.data_mut() {
                *v = f32::from_le_bytes(body[cursor..cursor + 4].try_into().expect("4 bytes"));
                cursor += 4;
            }
        }
    }
    Ok(model)
}

/// Writes a checkpoint atomically (temporary file + rename).
pub fn save_model(model: &Model<f32>, path: &Path) -> Result<(), ModelError> {
    crate::io::write_atomic(path, &write_model(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model<f32>, ModelError> {
    read_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embnet::Ratio;

    fn model() -> Model<f32> {
        let mut m: Model<f32> = build_model(
            &ArchConfig {
                h: 16,
                k: 5,
                width_multiplier: Ratio::new(1, 16),
                ..ArchConfig::default()
            },
            5,
        )
        .unwrap();
        m.meta = TrainingMeta {
            epochs_seen: 7,
            best_mrr: 0.8123456789,
            best_epoch: 3,
            seed: 5,
        };
        m.layers[1].get_mut("running_var").unwrap().data_mut()[0] = 0.3;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = write_model(&m);
        let back = read_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_model(&back), bytes);
        let d: Model<f32> = build_model(&ArchConfig::default(), 1).unwrap();
        assert_eq!(read_model(&write_model(&d)).unwrap(), d);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = write_model(&model());
        for cut in [bytes.len() - 1, bytes.len() / 2, 20, 9, 2] {
            let err = read_model(&bytes[..cut]).unwrap_err();
            assert_eq!(err.name(), "ChecksumMismatch", "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert_eq!(read_model(&flipped).unwrap_err().name(), "ChecksumMismatch");
    }

    #[test]
    fn unknown_version_is_reported() {
        let mut bytes = write_model(&model());
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        match read_model(&bytes).unwrap_err() {
            ModelError::FormatVersionMismatch(7) => {}
            e => panic!("unexpected {e}"),
        }
        assert_eq!(read_model(b"NOPE....").unwrap_err().name(), "InvalidFormat");
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.embn");
        let m = model();
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
        assert_eq!(
            load_model(&dir.path().join("missing")).unwrap_err().name(),
            "IoError"
        );
    }
}
