//! Binary model checkpoints.
//!
//! Layout: the magic bytes `PLIFT1`, a little-endian u32 manifest length,
//! a JSON manifest (model hyperparameters, joint layout, normalization
//! statistics, and the name + shape of every tensor), then the raw tensor
//! data as little-endian f64 in manifest order. The declared shapes must
//! account for every trailing byte, so shape tampering and truncation are
//! both caught by a byte-count check before any tensor is rebuilt.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{load_named_tensors, HasParams};
use crate::pipeline::{NormStats, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"PLIFT1";

/// Model hyperparameters needed to rebuild the parameter structs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub k: usize,
    pub joint_names: Vec<String>,
    pub hidden_width: usize,
    pub lstm_layers: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: ModelMeta,
    stats: NormStats,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub stats: NormStats,
    pub meta: ModelMeta,
}

pub fn save_checkpoint(params: &ParamSet, stats: &NormStats, meta: &ModelMeta, path: &Path) -> Result<()> {
    let named = params.named_tensors();
    let manifest = Manifest {
        meta: meta.clone(),
        stats: stats.clone(),
        tensors: named
            .iter()
            .map(|(name, t, _)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = File::create(path)?;
    out.write_all(MAGIC)?;
    out.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    out.write_all(&manifest_json)?;
    for (_, t, _) in &named {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let len_start = MAGIC.len();
    let manifest_len = u32::from_le_bytes(bytes[len_start..len_start + 4].try_into().expect("4 bytes")) as usize;
    let manifest_start = len_start + 4;
    if bytes.len() < manifest_start + manifest_len {
        return Err(Error::CheckpointFormat(format!(
            "manifest declares {manifest_len} bytes, file holds {}",
            bytes.len() - manifest_start
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[manifest_start..manifest_start + manifest_len])
        .map_err(|e| Error::CheckpointFormat(format!("bad manifest: {e}")))?;

    let data = &bytes[manifest_start + manifest_len..];
    let expected_bytes: usize = manifest
        .tensors
        .iter()
        .map(|t| 8 * t.shape.iter().product::<usize>())
        .sum();
    if data.len() != expected_bytes {
        return Err(Error::CheckpointFormat(format!(
            "tensor data length mismatch: manifest declares {expected_bytes} bytes, found {}",
            data.len()
        )));
    }

    let mut tensors = BTreeMap::new();
    let mut offset = 0usize;
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let start = offset + 8 * i;
            values.push(f64::from_le_bytes(data[start..start + 8].try_into().expect("8 bytes")));
        }
        offset += 8 * count;
        tensors.insert(
            entry.name.clone(),
            Tensor::new(entry.shape.clone(), values)
                .map_err(|e| Error::CheckpointFormat(format!("tensor `{}`: {e}", entry.name)))?,
        );
    }

    let meta = manifest.meta;
    let mut params = ParamSet::zeros(meta.k, meta.hidden_width, meta.lstm_layers);
    load_named_tensors(&mut params, &tensors)
        .map_err(|e| Error::CheckpointFormat(format!("tensor set mismatch: {e}")))?;
    Ok(Checkpoint {
        params,
        stats: manifest.stats,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn fixture() -> (ParamSet, NormStats, ModelMeta) {
        let mut rng = ChaCha8Rng::seed_from_u64(777);
        let params = ParamSet::xavier(3, 6, 2, &mut rng);
        let stats = NormStats {
            min2d: vec![0.0; 6],
            max2d: vec![640.0; 6],
            min3d: vec![-900.0; 9],
            max3d: vec![900.0; 9],
        };
        let meta = ModelMeta {
            k: 3,
            joint_names: vec!["a".into(), "b".into(), "c".into()],
            hidden_width: 6,
            lstm_layers: 2,
        };
        (params, stats, meta)
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (params, stats, meta) = fixture();
        save_checkpoint(&params, &stats, &meta, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.stats, stats);
        assert_eq!(loaded.meta, meta);

        // file-level idempotence: saving the load is byte-identical
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&loaded.params, &loaded.stats, &loaded.meta, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (params, stats, meta) = fixture();
        save_checkpoint(&params, &stats, &meta, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn manifest_shape_tamper_fails_byte_count() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (params, stats, meta) = fixture();
        save_checkpoint(&params, &stats, &meta, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // grow one declared extent in the JSON manifest without touching data
        let manifest_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let manifest_text = String::from_utf8(bytes[10..10 + manifest_len].to_vec()).unwrap();
        let tampered_text = manifest_text.replacen("\"shape\":[6,6]", "\"shape\":[7,6]", 1);
        assert_ne!(manifest_text, tampered_text, "fixture must contain a [6,6] tensor");
        let mut tampered = Vec::new();
        tampered.extend_from_slice(&bytes[..6]);
        tampered.extend_from_slice(&(tampered_text.len() as u32).to_le_bytes());
        tampered.extend_from_slice(tampered_text.as_bytes());
        tampered.extend_from_slice(&bytes[10 + manifest_len..]);
        std::fs::write(&path, &tampered).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn truncated_data_reports_expected_vs_actual() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (params, stats, meta) = fixture();
        save_checkpoint(&params, &stats, &meta, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 17]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("declares") && msg.contains("found"), "{msg}");
    }
}
