//! Parameter checkpoints: a JSON document mapping parameter names to shape
//! and values, with a format-version header and free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            metadata: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    /// Adds every parameter of `store`, prefixing names with `namespace/`
    /// when the namespace is non-empty.
    pub fn insert_store(&mut self, namespace: &str, store: &ParamStore) {
        for p in store.iter() {
            let key = if namespace.is_empty() {
                p.name.clone()
            } else {
                format!("{namespace}/{}", p.name)
            };
            self.params.insert(
                key,
                ParamEntry {
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                },
            );
        }
    }

    /// Overwrites every parameter of `store` from the entries under
    /// `namespace`. Missing entries and shape differences are errors.
    pub fn load_store(&self, namespace: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let key = if namespace.is_empty() {
                name
            } else {
                format!("{namespace}/{name}")
            };
            let entry = self
                .params
                .get(&key)
                .ok_or_else(|| Error::Format(format!("missing parameter {key}")))?;
            let current = store.value(id).shape();
            if entry.shape != current {
                return Err(Error::ShapeMismatch(format!(
                    "{key}: checkpoint shape {:?}, network expects {:?}",
                    entry.shape, current
                )));
            }
            let t = Tensor::new(entry.shape.clone(), entry.values.clone())?;
            *store.value_mut(id) = t;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        for (k, e) in &ck.params {
            if e.shape.iter().product::<usize>() != e.values.len() {
                return Err(Error::Format(format!("{k}: shape/value count disagree")));
            }
        }
        Ok(ck)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}
