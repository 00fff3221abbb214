//! "XFVC" checkpoint reading and writing.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchDescriptor;
use crate::container;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XFVC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    #[serde(flatten)]
    pub arch: ArchDescriptor,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Architecture plus raw named tensors, before typing into model weights.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// All expected tensors, zero-filled except norm gains which are ones.
    pub fn zeros(arch: ArchDescriptor) -> Self {
        let tensors = arch
            .expected_tensors()
            .into_iter()
            .map(|(name, dims)| {
                let n = dims.iter().product();
                let fill = if name.ends_with("ln1.weight")
                    || name.ends_with("ln2.weight")
                    || name == "final_norm.weight"
                {
                    1.0
                } else {
                    0.0
                };
                NamedTensor {
                    name,
                    dims,
                    data: vec![fill; n],
                }
            })
            .collect();
        Self { arch, tensors }
    }

    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for t in &self.tensors {
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::Integrity(format!(
                    "tensor {} has {} values for dims {:?}",
                    t.name,
                    t.data.len(),
                    t.dims
                )));
            }
        }
        let manifest = serde_json::to_value(self.manifest())?;
        let payload: Vec<f32> = self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
        container::encode(CHECKPOINT_MAGIC, &manifest, &payload)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = container::decode(CHECKPOINT_MAGIC, bytes)?;
        for (field, known) in [
            ("norm_kind", &["layernorm", "rmsnorm"][..]),
            ("pos_kind", &["learned", "rotary"][..]),
            ("mlp_kind", &["gelu_mlp", "swiglu"][..]),
        ] {
            if let Some(v) = raw.manifest.get(field).and_then(|v| v.as_str()) {
                if !known.contains(&v) {
                    return Err(Error::Capability(format!("unsupported {field} {v:?}")));
                }
            }
        }
        let manifest: CheckpointManifest = serde_json::from_value(raw.manifest)
            .map_err(|e| Error::Format(format!("malformed checkpoint manifest: {e}")))?;
        manifest.arch.validate()?;
        manifest.arch.check_supported()?;

        let total: usize = manifest
            .tensors
            .iter()
            .map(|t| t.dims.iter().product::<usize>())
            .sum();
        if total != raw.payload.len() {
            return Err(Error::Integrity(format!(
                "manifest declares {total} values, payload holds {}",
                raw.payload.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let n: usize = entry.dims.iter().product();
            tensors.push(NamedTensor {
                name: entry.name,
                dims: entry.dims,
                data: raw.payload[offset..offset + n].to_vec(),
            });
            offset += n;
        }
        let ckpt = Self {
            arch: manifest.arch,
            tensors,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Every tensor the architecture needs is present with the right shape.
    pub fn check_shapes(&self) -> Result<()> {
        let by_name: HashMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, dims) in self.arch.expected_tensors() {
            match by_name.get(name.as_str()) {
                None => return Err(Error::Integrity(format!("missing tensor {name}"))),
                Some(t) if t.dims != dims => {
                    return Err(Error::Integrity(format!(
                        "tensor {name} has dims {:?}, architecture needs {dims:?}",
                        t.dims
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}
