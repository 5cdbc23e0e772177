//! Model container: a JSON manifest plus a sibling blob of little-endian
//! `f32` tensor data addressed by `(offset, byte_length)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Layer, ModelGraph, TensorSpec, KNOWN_KINDS};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorIndexEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    layers: Vec<serde_json::Value>,
    tensor_index: Vec<TensorIndexEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
}

/// Lays tensors out back to back in iteration order.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = &'a TensorSpec>) -> (Vec<TensorIndexEntry>, Vec<u8>) {
    let mut index = Vec::new();
    let mut blob = Vec::new();
    for t in tensors {
        let offset = blob.len() as u64;
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        index.push(TensorIndexEntry {
            name: t.name.clone(),
            dtype: "f32".into(),
            shape: t.shape.clone(),
            offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    (index, blob)
}

pub fn decode_tensors(index: &[TensorIndexEntry], blob: &[u8]) -> Result<Vec<TensorSpec>> {
    let mut names = BTreeSet::new();
    let mut out = Vec::with_capacity(index.len());
    for entry in index {
        if !names.insert(entry.name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor `{}`", entry.name)));
        }
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor `{}` has unsupported dtype `{}`",
                entry.name, entry.dtype
            )));
        }
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(Error::Format(format!(
                "tensor `{}` has invalid shape {:?}",
                entry.name, entry.shape
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor `{}` is too large", entry.name)))?;
        if numel as u64 != entry.byte_length {
            return Err(Error::Format(format!(
                "tensor `{}` declares {} bytes but its shape needs {numel}",
                entry.name, entry.byte_length
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.byte_length)
            .filter(|&e| e <= blob.len() as u64)
            .ok_or_else(|| {
                Error::Format(format!(
                    "tensor `{}` range {}+{} exceeds the {}-byte data section",
                    entry.name,
                    entry.offset,
                    entry.byte_length,
                    blob.len()
                ))
            })?;
        let bytes = &blob[entry.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(TensorSpec::new(&entry.name, entry.shape.clone(), data));
    }
    Ok(out)
}

fn parse_layer(value: serde_json::Value) -> Result<Layer> {
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| Error::Format("layer without a string `kind`".into()))?;
    if !KNOWN_KINDS.contains(&kind) {
        return Err(Error::UnsupportedLayer(kind.to_string()));
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("layer: {e}")))
}

pub fn encode_model(model: &ModelGraph) -> Result<(Vec<u8>, Vec<u8>)> {
    let (tensor_index, blob) = encode_tensors(model.tensors.values());
    let layers = model
        .layers
        .iter()
        .map(serde_json::to_value)
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        layers,
        tensor_index,
        metadata: model.metadata.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    Ok((json, blob))
}

/// Parses a manifest and its data section. Container-level checks only;
/// graph invariants are left to [`super::validate_graph`].
pub fn decode_model(manifest: &[u8], blob: &[u8]) -> Result<ModelGraph> {
    let manifest: Manifest =
        serde_json::from_slice(manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", manifest.version)));
    }
    let layers = manifest
        .layers
        .into_iter()
        .map(parse_layer)
        .collect::<Result<Vec<_>>>()?;
    let tensors = decode_tensors(&manifest.tensor_index, blob)?
        .into_iter()
        .map(|t| (t.name.clone(), t))
        .collect();
    Ok(ModelGraph {
        layers,
        tensors,
        metadata: manifest.metadata,
    })
}

/// `model.json` -> `model.bin`.
pub fn default_weights_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_model(model: &ModelGraph, manifest_path: &Path, weights_path: Option<&Path>) -> Result<()> {
    let (json, blob) = encode_model(model)?;
    let weights = weights_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_weights_path(manifest_path));
    fs::write(manifest_path, json)?;
    fs::write(weights, blob)?;
    Ok(())
}

pub fn load_model(manifest_path: &Path, weights_path: Option<&Path>) -> Result<ModelGraph> {
    let weights = weights_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_weights_path(manifest_path));
    let json = fs::read(manifest_path)?;
    let blob = fs::read(weights)?;
    decode_model(&json, &blob)
}

/// SHA-256 over the architecture-bearing part of the manifest.
pub fn manifest_fingerprint(model: &ModelGraph) -> Result<String> {
    let layers = serde_json::to_vec(&model.layers)?;
    let mut shapes: Vec<(&str, &[usize])> = model
        .tensors
        .values()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    shapes.sort();
    let mut hasher = Sha256::new();
    hasher.update(&layers);
    hasher.update(serde_json::to_vec(&shapes)?);
    Ok(hex::encode(hasher.finalize()))
}
