//! Model checkpoints: every parameter and normalization buffer as little-endian
//! `f64` in a safetensors file, plus a JSON manifest stored in its header.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use safetensors::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{CascadeConfig, CascadeModel};
use crate::error::{CfaError, Result};
use crate::heatmap::FusionMode;
use crate::tensor::Tensor;

const MANIFEST_KEY: &str = "cfa.manifest";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub num_stages: usize,
    pub fusion_window: usize,
    pub fusion_mode: FusionMode,
    pub config_hash: String,
    /// One hash per stage configuration, in stage order.
    pub stage_hashes: Vec<String>,
    /// File hash of the checkpoint this one was grown or resumed from.
    pub parent: Option<String>,
    pub config: CascadeConfig,
}

impl Manifest {
    pub fn for_model(model: &CascadeModel, parent: Option<String>) -> Self {
        let config = model.config().clone();
        Manifest {
            format_version: FORMAT_VERSION,
            num_stages: config.num_stages(),
            fusion_window: config.fusion_window,
            fusion_mode: config.fusion_mode,
            config_hash: config.hash(),
            stage_hashes: config
                .stages
                .iter()
                .map(|s| sha256_hex(serde_json::to_string(s).expect("config serializes").as_bytes()))
                .collect(),
            parent,
            config,
        }
    }
}

struct F64View {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for F64View {
    fn dtype(&self) -> Dtype {
        Dtype::F64
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn ckpt_err(path: &Path, message: impl std::fmt::Display) -> CfaError {
    CfaError::Checkpoint(format!("{}: {message}", path.display()))
}

/// Serialized checkpoint bytes; identical models give identical bytes.
pub fn to_bytes(model: &CascadeModel, parent: Option<String>) -> Result<Vec<u8>> {
    let manifest = Manifest::for_model(model, parent);
    let tensors: Vec<(String, F64View)> = model
        .store()
        .entries()
        .iter()
        .map(|e| {
            let bytes = e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (
                e.name.clone(),
                F64View {
                    shape: e.value.shape().to_vec(),
                    bytes,
                },
            )
        })
        .collect();
    // A single metadata entry keeps the header byte-for-byte reproducible.
    let meta = HashMap::from([(
        MANIFEST_KEY.to_string(),
        serde_json::to_string(&manifest).expect("manifest serializes"),
    )]);
    safetensors::serialize(tensors, Some(meta)).map_err(|e| CfaError::Checkpoint(e.to_string()))
}

/// Writes the checkpoint and returns its file hash.
pub fn save(model: &CascadeModel, path: impl AsRef<Path>, parent: Option<String>) -> Result<String> {
    let path = path.as_ref();
    let bytes = to_bytes(model, parent)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CfaError::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| CfaError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CfaError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CfaError::io(path, e))?;
    manifest_from_bytes(&bytes, path)
}

fn manifest_from_bytes(bytes: &[u8], path: &Path) -> Result<Manifest> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(path, e))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| ckpt_err(path, "missing manifest"))?;
    let manifest: Manifest = serde_json::from_str(text).map_err(|e| ckpt_err(path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(
            path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    if manifest.config_hash != manifest.config.hash() {
        return Err(ckpt_err(path, "manifest config hash does not match its config"));
    }
    Ok(manifest)
}

/// Rebuilds the model described by the manifest and restores every tensor.
pub fn load(path: impl AsRef<Path>) -> Result<(CascadeModel, Manifest)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CfaError::io(path, e))?;
    let manifest = manifest_from_bytes(&bytes, path)?;
    let file = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut model = CascadeModel::new(manifest.config.clone())?;

    let expected: BTreeSet<String> = model.store().entries().iter().map(|e| e.name.clone()).collect();
    let found: BTreeSet<String> = file.names().into_iter().map(str::to_string).collect();
    if expected != found {
        let missing: Vec<_> = expected.difference(&found).cloned().collect();
        let extra: Vec<_> = found.difference(&expected).cloned().collect();
        return Err(ckpt_err(
            path,
            format!("tensor set mismatch; missing {missing:?}, unexpected {extra:?}"),
        ));
    }
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let name = model.store().entry(id).name.clone();
        let view = file.tensor(&name).map_err(|e| ckpt_err(path, e))?;
        if view.dtype() != Dtype::F64 {
            return Err(ckpt_err(path, format!("{name} is {:?}, expected F64", view.dtype())));
        }
        let current = model.store().get(id);
        if view.shape() != current.shape() {
            return Err(ckpt_err(
                path,
                format!("{name} has shape {:?}, expected {:?}", view.shape(), current.shape()),
            ));
        }
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        *model.store_mut().get_mut(id) = Tensor::from_vec(view.shape(), data)?;
    }
    Ok((model, manifest))
}
