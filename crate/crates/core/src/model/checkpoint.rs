//! On-disk checkpoints: `manifest.json` plus a little-endian `f32` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub model: String,
    pub epochs_run: usize,
    pub final_lr: f32,
    pub seed: u64,
    pub batch_size: usize,
    pub desk_scale: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainingMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    training_meta: TrainingMeta,
    blob: String,
    blob_bytes: usize,
    parameters: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

impl Checkpoint {
    pub fn new(model: Model, meta: TrainingMeta) -> Self {
        Self { model, meta }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Serialises to `(manifest JSON, blob bytes)`.
    pub fn to_bytes(&self) -> Result<(String, Vec<u8>)> {
        let mut blob = Vec::with_capacity(self.model.params.count() * 4);
        let mut parameters = Vec::with_capacity(self.model.params.len());
        for (name, t) in self.model.params.iter() {
            parameters.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            training_meta: self.meta.clone(),
            blob: BLOB_FILE.to_string(),
            blob_bytes: blob.len(),
            parameters,
        };
        Ok((serde_json::to_string_pretty(&manifest)?, blob))
    }

    pub fn from_bytes(manifest: &str, blob: &[u8]) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(manifest)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        manifest.config.validate()?;
        if blob.len() != manifest.blob_bytes {
            return Err(Error::Checkpoint(format!(
                "blob is {} bytes, manifest declares {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let expected: std::collections::HashMap<_, _> =
            manifest.config.param_shapes().into_iter().collect();
        let mut named = Vec::with_capacity(manifest.parameters.len());
        for entry in manifest.parameters {
            if let Some(shape) = expected.get(&entry.name) {
                if *shape != entry.shape {
                    return Err(Error::ParamShape {
                        name: entry.name,
                        expected: shape.clone(),
                        found: entry.shape,
                    });
                }
            }
            let n: usize = entry.shape.iter().product();
            let bytes = blob
                .get(entry.offset..entry.offset + 4 * n)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("parameter `{}` runs past the end of the blob", entry.name))
                })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            named.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        let params = Params::from_named(&manifest.config, named)?;
        Ok(Self {
            model: Model {
                config: manifest.config,
                params,
            },
            meta: manifest.training_meta,
        })
    }

    /// Writes `manifest.json` and `params.bin` into `dir`, creating it if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let (manifest, blob) = self.to_bytes()?;
        fs::write(dir.join(BLOB_FILE), blob)?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (mp, bp) = (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE));
        let manifest = fs::read_to_string(&mp).map_err(Error::file(&mp))?;
        let blob = fs::read(&bp).map_err(Error::file(&bp))?;
        Self::from_bytes(&manifest, &blob)
    }
}
