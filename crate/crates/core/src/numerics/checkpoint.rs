//! On-disk checkpoint format: a JSON manifest mapping tensor names to
//! shapes and element offsets, plus a flat little-endian f64 payload.
//! Round-trips are byte-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::adam::AdamState;
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

const FORMAT_TAG: &str = "limn-checkpoint-v1";
const MOMENT1_PREFIX: &str = "adam.m/";
const MOMENT2_PREFIX: &str = "adam.v/";

/// A complete named parameter set plus model config and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    /// Model-specific configuration, stored verbatim in the manifest.
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    entries: BTreeMap<String, ManifestEntry>,
    config: serde_json::Value,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl Checkpoint {
    pub fn new(params: ParamStore, optimizer: Option<AdamState>, config: serde_json::Value) -> Self {
        Checkpoint { params, optimizer, config }
    }

    /// Hash of the parameter content (moments excluded).
    pub fn content_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut named: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        if let Some(adam) = &self.optimizer {
            for (n, t) in &adam.first_moment {
                named.push((format!("{MOMENT1_PREFIX}{n}"), t));
            }
            for (n, t) in &adam.second_moment {
                named.push((format!("{MOMENT2_PREFIX}{n}"), t));
            }
        }
        named.sort_by(|a, b| a.0.cmp(&b.0));

        let mut entries = BTreeMap::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0u64;
        for (name, tensor) in named {
            entries.insert(name, ManifestEntry { shape: tensor.shape().to_vec(), offset });
            for &v in tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += tensor.len() as u64;
        }
        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            entries,
            config: self.config.clone(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerMeta {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
            }),
        };
        fs::write(manifest_path(stem), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(payload_path(stem), payload)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Checkpoint::save`].
    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(stem))?)?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
        }
        let payload = fs::read(payload_path(stem))?;
        if payload.len() % 8 != 0 {
            return Err(Error::Checkpoint("payload is not a whole number of f64".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let mut params = ParamStore::new();
        let mut m1: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut m2: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, entry) in &manifest.entries {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel;
            if end > values.len() {
                return Err(Error::Checkpoint(format!("entry `{name}` exceeds payload")));
            }
            let tensor = Tensor::new(&entry.shape, values[start..end].to_vec())?;
            if let Some(rest) = name.strip_prefix(MOMENT1_PREFIX) {
                m1.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix(MOMENT2_PREFIX) {
                m2.insert(rest.to_string(), tensor);
            } else {
                params.insert(name.clone(), tensor);
            }
        }
        let optimizer = manifest.optimizer.map(|meta| AdamState {
            lr: meta.lr,
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            step: meta.step,
            first_moment: m1,
            second_moment: m2,
        });
        Ok(Checkpoint { params, optimizer, config: manifest.config })
    }
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn payload_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample_checkpoint() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("enc.w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.25]).unwrap());
        params.insert("tokens", Tensor::new(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let mut adam = AdamState::new(1e-4);
        adam.step = 17;
        adam.first_moment =
            BTreeMap::from([("enc.w".to_string(), Tensor::full(&[2, 3], 0.25))]);
        adam.second_moment =
            BTreeMap::from([("enc.w".to_string(), Tensor::full(&[2, 3], 0.5))]);
        Checkpoint::new(params, Some(adam), serde_json::json!({"d": 32, "u": 8}))
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = std::env::temp_dir().join(format!("limn-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let stem_a = dir.join("a");
        let stem_b = dir.join("b");

        let original = sample_checkpoint();
        original.save(&stem_a).unwrap();
        let loaded = Checkpoint::load(&stem_a).unwrap();
        assert_eq!(loaded, original);
        loaded.save(&stem_b).unwrap();

        let bytes = |stem: &Path, ext: &str| std::fs::read(stem.with_extension(ext)).unwrap();
        assert_eq!(bytes(&stem_a, "json"), bytes(&stem_b, "json"));
        assert_eq!(bytes(&stem_a, "bin"), bytes(&stem_b, "bin"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
