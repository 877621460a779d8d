//! Model checkpoints as a single JSON document.
//!
//! Layout (version 1):
//!
//! ```text
//! {
//!   "format":  "tabtoken-checkpoint",
//!   "version": 1,
//!   "config":  { "d_model", "layers", "heads", "ff_dim", "max_classes", "max_numerical" },
//!   "schema":  null | { "columns": [ { "name", "kind": "numerical"|"categorical", "vocabulary": [..] } ] },
//!   "stats":   null | { "means": [..], "stds": [..] },
//!   "tensors": [ { "name", "shape": [..], "requires_grad", "frozen_rows": [..], "data": [..] } ]
//! }
//! ```
//!
//! Tensors appear in parameter-store order. Floats are written in shortest
//! round-trip form, so loading restores every value bit for bit and writing
//! the same model twice yields identical bytes. Readers accept any version
//! up to [`VERSION`] and ignore unknown keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::schema::FeatureSchema;
use crate::tensor::{Param, ParamStore, Tensor};

pub const FORMAT: &str = "tabtoken-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    requires_grad: bool,
    #[serde(default)]
    frozen_rows: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    config: ModelConfig,
    schema: Option<FeatureSchema>,
    stats: Option<NormStats>,
    tensors: Vec<TensorEntry>,
}

pub fn to_string(model: &Model) -> Result<String> {
    let doc = Document {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config,
        schema: model.schema.clone(),
        stats: model.stats.clone(),
        tensors: model
            .store
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.to_string(),
                shape: p.tensor.shape.clone(),
                requires_grad: p.tensor.requires_grad,
                frozen_rows: p.frozen_rows.clone(),
                data: p.tensor.data.clone(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string(&doc).map_err(|e| Error::Checkpoint(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_str(text: &str) -> Result<Model> {
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if doc.format != FORMAT {
        return Err(Error::Checkpoint(format!("unexpected format tag {:?}", doc.format)));
    }
    if doc.version == 0 || doc.version > VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", doc.version)));
    }
    doc.config.validate()?;
    let mut store = ParamStore::new();
    for t in doc.tensors {
        let mut tensor = Tensor::new(t.shape, t.data).map_err(|e| Error::Checkpoint(format!("{}: {e}", t.name)))?;
        tensor.requires_grad = t.requires_grad;
        if t.frozen_rows.iter().any(|&r| r >= tensor.shape[0]) {
            return Err(Error::Checkpoint(format!("{}: frozen row out of range", t.name)));
        }
        store.insert_param(t.name, Param { tensor, frozen_rows: t.frozen_rows });
    }
    Ok(Model { config: doc.config, store, schema: doc.schema, stats: doc.stats })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_str(&std::fs::read_to_string(path)?)
}
