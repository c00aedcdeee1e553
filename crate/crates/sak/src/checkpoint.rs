//! Binary checkpoint container: model configuration, run seed, and named
//! parameter tensors.
//!
//! ```text
//! magic   b"SAKC"
//! version u8 (currently 1)
//! u32 LE  metadata length
//! meta    UTF-8 JSON: ModelConfig, seed, dtype, tensor directory
//! payload tensors in directory order, values little-endian
//! ```
//!
//! The default dtype is f64 so save/load round-trips are bitwise.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"SAKC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CkptDtype {
    F64,
    F32,
}

impl CkptDtype {
    fn size(self) -> usize {
        match self {
            CkptDtype::F64 => 8,
            CkptDtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    seed: u64,
    dtype: CkptDtype,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamSet,
}

pub fn save(path: &Path, config: &ModelConfig, seed: u64, params: &ParamSet) -> Result<()> {
    save_with_dtype(path, config, seed, params, CkptDtype::F64)
}

pub fn save_with_dtype(
    path: &Path,
    config: &ModelConfig,
    seed: u64,
    params: &ParamSet,
    dtype: CkptDtype,
) -> Result<()> {
    let tensors: Vec<TensorEntry> = params
        .iter()
        .map(|(name, value)| TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
        })
        .collect();
    let meta = Meta {
        config: config.clone(),
        seed,
        dtype,
        tensors,
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for (_, value) in params.iter() {
        for &v in value.iter() {
            match dtype {
                CkptDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                CkptDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let mut file = File::create(path)?;
    file.write_all(&out)?;
    file.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    load_from_bytes(&bytes)
}

pub fn load_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 9 {
        return Err(Error::Truncated("shorter than fixed prefix".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let meta_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if meta_len > 1 << 24 {
        return Err(Error::Format("metadata length exceeds 16 MiB cap".into()));
    }
    if bytes.len() < 9 + meta_len {
        return Err(Error::Truncated("file ends inside metadata".into()));
    }
    let meta: Meta = serde_json::from_slice(&bytes[9..9 + meta_len])
        .map_err(|e| Error::Format(format!("bad metadata JSON: {e}")))?;

    let word = meta.dtype.size();
    let payload = &bytes[9 + meta_len..];
    let expected: usize = meta
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>().max(1) * word)
        .try_fold(0usize, |acc, n: usize| acc.checked_add(n))
        .ok_or_else(|| Error::Format("tensor directory overflows".into()))?;
    if payload.len() < expected {
        return Err(Error::Truncated(format!(
            "payload holds {} bytes, directory implies {expected}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes, directory implies {expected} (trailing data)",
            payload.len()
        )));
    }

    let mut params = ParamSet::new();
    let mut seen = HashMap::new();
    let mut offset = 0usize;
    for entry in &meta.tensors {
        if seen.insert(entry.name.clone(), ()).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", entry.name)));
        }
        let count: usize = entry.shape.iter().product::<usize>().max(1);
        if count > 1 << 28 {
            return Err(Error::Format(format!(
                "tensor {} too large ({count} scalars)",
                entry.name
            )));
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * word;
            let v = match meta.dtype {
                CkptDtype::F64 => {
                    f64::from_le_bytes(payload[at..at + 8].try_into().unwrap())
                }
                CkptDtype::F32 => {
                    f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()) as f64
                }
            };
            values.push(v);
        }
        offset += count * word;
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), values)
            .map_err(|e| Error::Format(format!("tensor {}: {e}", entry.name)))?;
        params.insert(entry.name.clone(), arr);
    }
    Ok(Checkpoint {
        config: meta.config,
        seed: meta.seed,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StudentModel;
    use tempfile::tempdir;

    fn config() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            depth: 4,
            embed_dim: 16,
            num_heads: 4,
            num_teachers: 1,
            adapter_reduction: 4,
            teacher_specs: Vec::new(),
            task_specs: Vec::new(),
            seed: 9,
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sakc");
        let model = StudentModel::init(config()).unwrap();
        save(&path, &model.config, 9, &model.params).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.seed, 9);
        assert_eq!(loaded.params.len(), model.params.len());
        for (name, value) in model.params.iter() {
            assert_eq!(loaded.params.get(name).unwrap(), value, "{name}");
        }
    }

    #[test]
    fn corrupt_and_truncated_files_fail_closed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sakc");
        let model = StudentModel::init(config()).unwrap();
        save(&path, &model.config, 1, &model.params).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        assert!(matches!(
            load_from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[2] = b'!';
        assert!(matches!(load_from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(load_from_bytes(&[]), Err(Error::Truncated(_))));
    }

    #[test]
    fn scalar_tensors_survive() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.sakc");
        let mut params = ParamSet::new();
        params.insert("alpha", ArrayD::from_elem(ndarray::IxDyn(&[]), 0.75));
        save(&path, &config(), 2, &params).unwrap();
        let loaded = load(&path).unwrap();
        let a = loaded.params.get("alpha").unwrap();
        assert_eq!(a.shape(), &[] as &[usize]);
        assert_eq!(a.iter().next().copied().unwrap(), 0.75);
    }
}
