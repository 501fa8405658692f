//! Checkpoint directories: `graph.json` (layer specs), one little-endian
//! f32 blob per stored tensor under `tensors/`, and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelGraph, ModelMeta};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    pub meta: ModelMeta,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset: String,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Free-form scalar results (accuracies, losses) recorded with the weights.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn new(dataset: impl Into<String>, epoch: usize, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dataset: dataset.into(),
            epoch,
            seed,
            config_hash: config_hash.into(),
            metrics: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

fn blob_file(name: &str) -> String {
    let safe: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect();
    format!("tensors/{safe}.bin")
}

/// Writes `model` into `dir` (created if needed); the manifest's tensor
/// index is filled in and returned.
pub fn save(dir: &Path, model: &ModelGraph, manifest: &Manifest) -> Result<Manifest> {
    fs::create_dir_all(dir.join("tensors"))?;
    let doc = GraphDoc { meta: model.meta.clone(), layers: model.layer_specs() };
    fs::write(dir.join("graph.json"), serde_json::to_string_pretty(&doc)?)?;
    let mut m = manifest.clone();
    m.tensors.clear();
    for (name, t) in model.named_tensors() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = blob_file(&name);
        fs::write(dir.join(&file), &bytes)?;
        m.tensors.push(TensorEntry { name, shape: t.shape().to_vec(), file, sha256: sha256_hex(&bytes) });
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| ckpt_err(&path, e.to_string()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(ckpt_err(&path, format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

/// Rebuilds the model and verifies every blob against its recorded digest.
pub fn load(dir: &Path) -> Result<(ModelGraph, Manifest)> {
    let manifest = read_manifest(dir)?;
    let gpath = dir.join("graph.json");
    let text = fs::read_to_string(&gpath).map_err(|e| ckpt_err(&gpath, e.to_string()))?;
    let doc: GraphDoc = serde_json::from_str(&text).map_err(|e| ckpt_err(&gpath, e.to_string()))?;
    let mut model = ModelGraph::from_specs(doc.meta, &doc.layers)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let path: PathBuf = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| ckpt_err(&path, err.to_string()))?;
        if sha256_hex(&bytes) != e.sha256 {
            return Err(ckpt_err(&path, "digest mismatch"));
        }
        if bytes.len() != 4 * e.shape.iter().product::<usize>() {
            return Err(ckpt_err(&path, format!("{} bytes do not fit shape {:?}", bytes.len(), e.shape)));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    model.load_tensors(&tensors).map_err(|e| ckpt_err(dir, e.to_string()))?;
    Ok((model, manifest))
}
