//! Checkpoint files: a JSON manifest next to a little-endian f32 blob.
//!
//! `model.ckpt` holds the manifest; the blob lives in `model.ckpt.bin`
//! (the manifest records the blob's file name). Parameters are stored in
//! network order at the byte offsets listed in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_network, Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "voxelnext-ckpt-1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: NetworkConfig,
    /// Free-form provenance (phase, seed, patch size, ...). No timestamps so
    /// that identical runs produce identical files.
    pub metadata: BTreeMap<String, String>,
    pub params: Vec<ParamEntry>,
    pub blob: String,
    pub blob_bytes: usize,
    /// Optimizer state is not persisted; the field is kept for readers.
    pub optimizer: Option<serde_json::Value>,
}

/// In-memory checkpoint: config, metadata and f32 parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub metadata: BTreeMap<String, String>,
    pub names: Vec<String>,
    pub params: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, metadata: BTreeMap<String, String>) -> Self {
        Self {
            config: net.config().clone(),
            metadata,
            names: net.names().to_vec(),
            params: net.params().to_vec(),
        }
    }

    /// Rebuilds the network this checkpoint was taken from.
    pub fn to_network(&self) -> Result<Network<f32>> {
        let mut net = build_network::<f32>(&self.config, 0)?;
        check_layout(&net, &self.names, &self.params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>())
            .map_err(Error::Structural)?;
        net.set_params(self.params.clone())?;
        Ok(net)
    }

    pub fn num_parameters(&self) -> usize {
        super::count_parameters(&self.params)
    }
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|d| d.join(blob))
        .unwrap_or_else(|| PathBuf::from(blob))
}

/// Compares a stored name/shape table against the network layout; reports
/// the first offending entry.
fn check_layout(
    net: &Network<f32>,
    names: &[String],
    shapes: &[Vec<usize>],
) -> std::result::Result<(), String> {
    for (i, (want_name, want)) in net.names().iter().zip(net.params()).enumerate() {
        let Some(name) = names.get(i) else {
            return Err(format!("missing parameter `{want_name}`"));
        };
        if name != want_name {
            return Err(format!(
                "parameter {i} is `{name}`, expected `{want_name}`"
            ));
        }
        if shapes[i] != want.shape() {
            return Err(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                shapes[i],
                want.shape()
            ));
        }
    }
    if names.len() > net.names().len() {
        return Err(format!("unexpected parameter `{}`", names[net.names().len()]));
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "checkpoint path has no file name"))?
        .to_string_lossy()
        .into_owned();
    let blob_name = format!("{file_name}.bin");
    let mut blob = Vec::with_capacity(ckpt.num_parameters() * 4);
    let mut entries = Vec::with_capacity(ckpt.params.len());
    for (name, p) in ckpt.names.iter().zip(&ckpt.params) {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            offset: blob.len(),
        });
        for v in p.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config: ckpt.config.clone(),
        metadata: ckpt.metadata.clone(),
        params: entries,
        blob: blob_name.clone(),
        blob_bytes: blob.len(),
        optimizer: None,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let bpath = blob_path(path, &blob_name);
    fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads and validates a checkpoint. With `expected` set, the stored config
/// must equal it.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            path,
            format!(
                "unsupported format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                manifest.format
            ),
        ));
    }
    if let Some(cfg) = expected {
        if *cfg != manifest.config {
            return Err(Error::format(
                path,
                "stored network config differs from the requested one",
            ));
        }
    }
    let net = build_network::<f32>(&manifest.config, 0)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let names: Vec<String> = manifest.params.iter().map(|e| e.name.clone()).collect();
    let shapes: Vec<Vec<usize>> = manifest.params.iter().map(|e| e.shape.clone()).collect();
    check_layout(&net, &names, &shapes).map_err(|r| Error::format(path, r))?;

    let bpath = blob_path(path, &manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut params = Vec::with_capacity(manifest.params.len());
    let mut cursor = 0usize;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        if entry.offset != cursor {
            return Err(Error::format(
                path,
                format!(
                    "parameter `{}` at offset {}, expected {cursor}",
                    entry.name, entry.offset
                ),
            ));
        }
        let end = cursor + n * 4;
        if end > blob.len() {
            return Err(Error::format(
                &bpath,
                format!(
                    "blob truncated at parameter `{}`: need {end} bytes, file has {}",
                    entry.name,
                    blob.len()
                ),
            ));
        }
        let data = blob[cursor..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Tensor::from_vec(entry.shape.clone(), data)?);
        cursor = end;
    }
    if cursor != blob.len() || blob.len() != manifest.blob_bytes {
        return Err(Error::format(
            &bpath,
            format!(
                "blob has {} bytes, manifest expects {}",
                blob.len(),
                manifest.blob_bytes
            ),
        ));
    }
    Ok(Checkpoint {
        config: manifest.config,
        metadata: manifest.metadata,
        names,
        params,
    })
}

/// Builds a network for `target` and copies every checkpoint parameter
/// whose shape matches. Backbone parameters must all match; head
/// parameters that differ (another class count) keep their fresh
/// initialization from `seed`.
pub fn load_backbone(ckpt: &Checkpoint, target: &NetworkConfig, seed: u64) -> Result<Network<f32>> {
    if !ckpt.config.same_backbone(target) {
        return Err(Error::Structural(
            "checkpoint backbone is incompatible with the target config".into(),
        ));
    }
    let mut net = build_network::<f32>(target, seed)?;
    let stored: BTreeMap<&str, &Tensor<f32>> = ckpt
        .names
        .iter()
        .map(String::as_str)
        .zip(&ckpt.params)
        .collect();
    let names = net.names().to_vec();
    for (name, value) in names.iter().zip(net.params_mut()) {
        match stored.get(name.as_str()) {
            Some(src) if src.shape() == value.shape() => *value = (*src).clone(),
            _ if Network::<f32>::is_head_param(name) => {}
            Some(src) => {
                return Err(Error::Structural(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, expected {:?}",
                    src.shape(),
                    value.shape()
                )))
            }
            None => {
                return Err(Error::Structural(format!(
                    "parameter `{name}` missing from the checkpoint"
                )))
            }
        }
    }
    Ok(net)
}
