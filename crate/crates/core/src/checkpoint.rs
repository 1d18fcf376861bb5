//! Directory checkpoints: a JSON manifest naming every parameter plus one
//! binary tensor file per parameter. The loader rebuilds a model from its
//! configuration and validates name and shape agreement entry by entry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::{format, Element, Tensor};

pub const MANIFEST_FORMAT: &str = "omniview-checkpoint";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Writes the manifest plus one tensor file per parameter into `dir`
/// (created if missing).
pub fn save<E: Element>(dir: &Path, model: &Model<E>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("create {}: {e}", dir.display())))?;
    let mut entries = Vec::new();
    let mut tensors: Vec<(String, Tensor<E>)> = Vec::new();
    model.for_each_named(&mut |name, t| tensors.push((name, t.clone())));
    for (i, (name, t)) in tensors.iter().enumerate() {
        let file = format!("p{i:04}.mvst");
        format::write_file(&dir.join(&file), t)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        dtype: E::DTYPE.to_string(),
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Io(format!("serialize manifest: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), json)
        .map_err(|e| Error::Io(format!("write manifest: {e}")))?;
    Ok(())
}

/// Rebuilds a model from `cfg` and loads every parameter from `dir`,
/// failing on the first name or shape disagreement.
pub fn load<E: Element>(dir: &Path, cfg: &ModelConfig) -> Result<Model<E>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Io(format!("read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Validation(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint format {}@{}",
            manifest.format, manifest.version
        )));
    }
    let mut model = build_model::<E>(cfg)?;
    let mut expected = Vec::new();
    model.for_each_named(&mut |name, t| expected.push((name, t.shape().to_vec())));
    if expected.len() != manifest.params.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} parameters, config defines {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    let mut loaded: Vec<Tensor<E>> = Vec::with_capacity(expected.len());
    for ((want_name, want_shape), entry) in expected.iter().zip(manifest.params.iter()) {
        if &entry.name != want_name {
            return Err(Error::Validation(format!(
                "checkpoint parameter {} where {} was expected",
                entry.name, want_name
            )));
        }
        if &entry.shape != want_shape {
            return Err(Error::Validation(format!(
                "parameter {}: checkpoint shape {:?} does not match configured {:?}",
                entry.name, entry.shape, want_shape
            )));
        }
        let dyn_t = format::read_file(&dir.join(&entry.file))?;
        if dyn_t.shape() != want_shape.as_slice() {
            return Err(Error::Validation(format!(
                "parameter {}: tensor file shape {:?} does not match manifest {:?}",
                entry.name,
                dyn_t.shape(),
                entry.shape
            )));
        }
        loaded.push(dyn_t.cast());
    }
    let mut it = loaded.into_iter();
    model.for_each_named_mut(&mut |_, t| {
        *t = it.next().expect("length checked above");
    });
    Ok(model)
}
