//! Super-net checkpoints: a JSON manifest next to a little-endian f32 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SuperNet;
use crate::error::{Error, Result};
use crate::space::SearchSpace;
use crate::split::GroupPlan;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "fsnas-supernet";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of f32 elements.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub space: SearchSpace,
    pub plan: GroupPlan,
    pub dropout_p: f32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    /// Caller-defined metadata such as epoch or step.
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CheckpointManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text)?;
        if m.format != CHECKPOINT_FORMAT || m.version != VERSION {
            return Err(Error::Format {
                offset: 0,
                msg: format!("unsupported checkpoint {} v{}", m.format, m.version),
            });
        }
        Ok(m)
    }

    pub fn blob_path(&self, manifest_path: &Path) -> PathBuf {
        manifest_path.with_file_name(&self.blob)
    }
}

impl SuperNet {
    /// Writes `path` (manifest) and a sibling `.bin` blob; returns the blob path.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<PathBuf> {
        let mut blob = Vec::with_capacity(self.num_params() * 4 + 64);
        let mut tensors = Vec::new();
        for spec in self.layout() {
            let t = self.read_tensor(&spec.name)?;
            tensors.push(TensorEntry {
                name: spec.name,
                shape: spec.shape,
                offset: blob.len() as u64,
                len: t.numel(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let blob_path = path.with_extension("bin");
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: VERSION,
            space: self.space().clone(),
            plan: self.plan().clone(),
            dropout_p: self.dropout_p,
            blob: blob_path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Usage(format!("bad checkpoint path {}", path.display())))?
                .to_string(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            tensors,
            meta,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        fs::write(path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
        Ok(blob_path)
    }

    /// Loads a checkpoint written by [`SuperNet::save`], verifying layout and digest.
    pub fn load(path: &Path) -> Result<(SuperNet, CheckpointManifest)> {
        let m = CheckpointManifest::read(path)?;
        let blob_path = m.blob_path(path);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if hex::encode(Sha256::digest(&blob)) != m.blob_sha256 {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{} does not match its recorded digest", blob_path.display()),
            });
        }
        let mut net = SuperNet::build_zeroed(&m.space, &m.plan)?;
        net.dropout_p = m.dropout_p;
        let specs = net.layout();
        if specs.len() != m.tensors.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("manifest lists {} tensors, layout has {}", m.tensors.len(), specs.len()),
            });
        }
        for (spec, e) in specs.iter().zip(&m.tensors) {
            let numel: usize = spec.shape.iter().product();
            if spec.name != e.name || spec.shape != e.shape || e.len != numel {
                return Err(Error::Format {
                    offset: e.offset,
                    msg: format!("tensor {} does not match layout entry {}", e.name, spec.name),
                });
            }
            let start = e.offset as usize;
            let bytes = blob.get(start..start + 4 * numel).ok_or_else(|| Error::Format {
                offset: e.offset,
                msg: format!("tensor {} runs past the end of the blob", e.name),
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            net.write_tensor(&spec.name, Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok((net, m))
    }
}
