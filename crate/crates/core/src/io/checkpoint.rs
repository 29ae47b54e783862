//! Checkpoint files: a JSON manifest followed by one contiguous blob of
//! little-endian f32 values.
//!
//! ```text
//! magic "SITCKPT\0" | manifest length u64 | manifest JSON | blob
//! ```
//!
//! Tensor offsets in the manifest are byte offsets into the blob. Every
//! tensor carries a CRC32 of its bytes, verified on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Result, SitError};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::VisionTransformer;

pub const MAGIC: &[u8; 8] = b"SITCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub group: ParamGroup,
    pub training_only: bool,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<u8>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &VisionTransformer<T>,
        metadata: BTreeMap<String, serde_json::Value>,
    ) -> Self {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (_, p) in model.params.iter() {
            let offset = blob.len() as u64;
            for &v in p.tensor.data() {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                group: p.group,
                training_only: p.training_only,
                crc32: crc32fast::hash(&blob[offset as usize..]),
            });
        }
        Checkpoint {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                config: model.config().clone(),
                tensors,
                metadata,
            },
            blob,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(SitError::Format("checkpoint: bad magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| SitError::Format("checkpoint: truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(SitError::Format(format!(
                "checkpoint: unsupported format version {}",
                manifest.format_version
            )));
        }
        Ok(Checkpoint {
            manifest,
            blob: bytes[end..].to_vec(),
        })
    }

    /// Decodes and checksum-verifies every tensor, optionally skipping
    /// training-only ones.
    pub fn params<T: Scalar>(&self, include_training_only: bool) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for e in &self.manifest.tensors {
            if e.dtype != "f32" {
                return Err(SitError::Format(format!(
                    "tensor `{}`: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let bytes = self
                .blob
                .get(start..start + 4 * numel)
                .ok_or_else(|| SitError::Format(format!("tensor `{}` exceeds blob", e.name)))?;
            let computed = crc32fast::hash(bytes);
            if computed != e.crc32 {
                return Err(SitError::Checksum {
                    name: e.name.clone(),
                    stored: e.crc32,
                    computed,
                });
            }
            if e.training_only && !include_training_only {
                continue;
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            store.add(
                e.name.clone(),
                Tensor::new(&e.shape, data)?,
                e.group,
                e.training_only,
            );
        }
        Ok(store)
    }

    pub fn model<T: Scalar>(&self, include_training_only: bool) -> Result<VisionTransformer<T>> {
        VisionTransformer::from_params(
            self.manifest.config.clone(),
            self.params(include_training_only)?,
        )
    }
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &VisionTransformer<T>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    super::write_atomic(path, &Checkpoint::from_model(model, metadata).to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&super::read_file(path)?)
}

/// Loads a model; training-only tensors are skipped unless requested.
pub fn load<T: Scalar>(path: &Path, include_training_only: bool) -> Result<VisionTransformer<T>> {
    load_checkpoint(path)?.model(include_training_only)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            depth: 2,
            stages: vec![1, 1],
            num_classes: 3,
            ..ModelConfig::desk_student()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = VisionTransformer::<f32>::new(tiny(), 4).unwrap();
        let ck = Checkpoint::from_model(&m, BTreeMap::new());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let m2: VisionTransformer<f32> = back.model(true).unwrap();
        for ((_, a), (_, b)) in m.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.training_only, b.training_only);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
    }

    #[test]
    fn training_only_tensors_are_skippable() {
        let m = VisionTransformer::<f32>::new(tiny(), 4).unwrap();
        let ck = Checkpoint::from_model(&m, BTreeMap::new());
        assert!(ck
            .manifest
            .tensors
            .iter()
            .any(|t| t.training_only && t.name.starts_with("rtsm.")));
        let lean: VisionTransformer<f32> = ck.model(false).unwrap();
        assert!(!lean.has_recalibration());
        assert_eq!(lean.params.count(true), m.params.count(false));
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let m = VisionTransformer::<f32>::new(tiny(), 4).unwrap();
        let mut bytes = Checkpoint::from_model(&m, BTreeMap::new())
            .to_bytes()
            .unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes)
            .unwrap()
            .params::<f32>(true)
            .unwrap_err();
        assert!(matches!(err, SitError::Checksum { .. }), "{err}");
    }
}
