use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FunctionVector;
use crate::battery::TemplateId;
use crate::container;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"XFVS";

#[derive(Serialize, Deserialize)]
struct StoreEntry {
    task: String,
    template: TemplateId,
    layer: usize,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    schema: u32,
    d_model: usize,
    vectors: Vec<StoreEntry>,
}

type Key = (String, TemplateId, usize, u64);

/// All FVs of one model, keyed by (task, template, layer, seed). Inserts are
/// idempotent: re-inserting a key replaces the vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FvStore {
    d_model: usize,
    entries: BTreeMap<Key, FunctionVector>,
}

impl FvStore {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            entries: BTreeMap::new(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, fv: FunctionVector) -> Result<()> {
        if fv.vector.len() != self.d_model {
            return Err(Error::Store(format!(
                "{} has length {}, store holds d_model {}",
                fv.id(),
                fv.vector.len(),
                self.d_model
            )));
        }
        self.entries
            .insert((fv.task.clone(), fv.template, fv.layer, fv.seed), fv);
        Ok(())
    }

    /// The FV for (task, template, layer); with several seeds, the lowest.
    pub fn get(&self, task: &str, template: TemplateId, layer: usize) -> Result<&FunctionVector> {
        let lo = (task.to_string(), template, layer, 0);
        let hi = (task.to_string(), template, layer, u64::MAX);
        self.entries
            .range(lo..=hi)
            .next()
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Store(format!("missing FV {task}/{template}/L{layer}")))
    }

    /// Every FV of `task` and `template`, keyed by layer.
    pub fn layers_of(&self, task: &str, template: TemplateId) -> BTreeMap<usize, FunctionVector> {
        let mut out = BTreeMap::new();
        for ((t, tpl, l, _), fv) in &self.entries {
            if t == task && *tpl == template {
                out.entry(*l).or_insert_with(|| fv.clone());
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &FunctionVector> {
        self.entries.values()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = StoreManifest {
            schema: 1,
            d_model: self.d_model,
            vectors: self
                .entries
                .values()
                .map(|fv| StoreEntry {
                    task: fv.task.clone(),
                    template: fv.template,
                    layer: fv.layer,
                    n_pos: fv.n_pos,
                    n_neg: fv.n_neg,
                    seed: fv.seed,
                })
                .collect(),
        };
        let payload: Vec<f32> = self.entries.values().flat_map(|fv| fv.vector.iter().copied()).collect();
        container::encode(STORE_MAGIC, &serde_json::to_value(manifest)?, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = container::decode(STORE_MAGIC, bytes)?;
        let manifest: StoreManifest = serde_json::from_value(raw.manifest)
            .map_err(|e| Error::Format(format!("FV store manifest: {e}")))?;
        let d = manifest.d_model;
        if raw.payload.len() != d * manifest.vectors.len() {
            return Err(Error::Integrity(format!(
                "FV store payload has {} values, manifest needs {}",
                raw.payload.len(),
                d * manifest.vectors.len()
            )));
        }
        let mut store = Self::new(d);
        for (i, e) in manifest.vectors.into_iter().enumerate() {
            let v = raw.payload[i * d..(i + 1) * d].to_vec();
            store.insert(FunctionVector::new(&e.task, e.template, e.layer, v, e.n_pos, e.n_neg, e.seed))?;
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
