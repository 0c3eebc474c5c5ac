//! Checkpoint directory: `manifest.json` plus `params.bin`.
//!
//! `params.bin` is every parameter's values as little-endian `f32`,
//! concatenated in manifest order. The manifest records each parameter's
//! byte offset and shape, and the blob's total length and SHA-256, so any
//! truncation or flipped byte is caught before a model is built.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Component, Model, ModelConfig, Param, ParamRegistry, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRecord {
    name: String,
    component: String,
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
    embedding: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainable_rows: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    languages: Vec<String>,
    native_vocab: Vec<String>,
    nonnative_vocab: Vec<String>,
    blob_len: u64,
    blob_sha256: String,
    params: Vec<ParamRecord>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `model` into directory `dir`, creating it if needed.
pub fn save_checkpoint(model: &Model<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut records = Vec::new();
    for (_, p) in model.registry().iter() {
        records.push(ParamRecord {
            name: p.name.clone(),
            component: p.component.to_string(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
            trainable: p.trainable,
            embedding: p.embedding,
            trainable_rows: p.row_mask.as_ref().map(|m| {
                m.iter()
                    .enumerate()
                    .filter(|(_, &k)| k)
                    .map(|(i, _)| i)
                    .collect()
            }),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        languages: model.languages().to_vec(),
        native_vocab: model.native_vocab().tokens().to_vec(),
        nonnative_vocab: model.nonnative_vocab().tokens().to_vec(),
        blob_len: blob.len() as u64,
        blob_sha256: hex(&Sha256::digest(&blob)),
        params: records,
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&man_path, text + "\n").map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Either the whole model
/// is restored or an error is returned; nothing partial escapes.
pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let man_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if (blob.len() as u64) < manifest.blob_len {
        return Err(Error::CheckpointTruncated {
            expected: manifest.blob_len,
            found: blob.len() as u64,
        });
    }
    if blob.len() as u64 != manifest.blob_len {
        return Err(Error::CheckpointCorrupted(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    if hex(&Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::CheckpointCorrupted(
            "params.bin checksum mismatch".into(),
        ));
    }
    manifest.config.validate()?;

    let mut registry = ParamRegistry::new();
    let mut expected_offset = 0u64;
    for rec in &manifest.params {
        if rec.offset != expected_offset {
            return Err(Error::CheckpointShape(format!(
                "{} starts at byte {}, expected {expected_offset}",
                rec.name, rec.offset
            )));
        }
        let count: usize = rec.shape.iter().product();
        let end = rec.offset + 4 * count as u64;
        if end > manifest.blob_len {
            return Err(Error::CheckpointShape(format!(
                "{} of shape {:?} runs past the blob",
                rec.name, rec.shape
            )));
        }
        let bytes = &blob[rec.offset as usize..end as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let value = Tensor::new(rec.shape.clone(), data)
            .map_err(|e| Error::CheckpointShape(e.to_string()))?;
        let row_mask = match &rec.trainable_rows {
            None => None,
            Some(rows) => {
                let mut mask = vec![false; value.rows()];
                for &r in rows {
                    *mask.get_mut(r).ok_or_else(|| {
                        Error::CheckpointShape(format!(
                            "{}: trainable row {r} out of range",
                            rec.name
                        ))
                    })? = true;
                }
                Some(mask)
            }
        };
        let component: Component = rec.component.parse()?;
        registry.insert(Param {
            name: rec.name.clone(),
            value,
            trainable: rec.trainable,
            component,
            embedding: rec.embedding,
            row_mask,
        })?;
        expected_offset = end;
    }
    if expected_offset != manifest.blob_len {
        return Err(Error::CheckpointShape(format!(
            "parameters cover {expected_offset} of {} blob bytes",
            manifest.blob_len
        )));
    }
    let native_vocab = Vocab::from_tokens("native", manifest.native_vocab)?;
    let nonnative_vocab = Vocab::from_tokens("nonnative", manifest.nonnative_vocab)?;
    let model = Model::from_parts(
        manifest.config,
        native_vocab,
        nonnative_vocab,
        registry,
        manifest.languages,
    );
    verify_layout(&model)?;
    Ok(model)
}

/// Every parameter a fresh model of the same config (and languages) would
/// have must be present with the same shape.
fn verify_layout(model: &Model<f32>) -> Result<()> {
    let mut reference = Model::<f32>::new(
        model.config().clone(),
        model.native_vocab().clone(),
        model.nonnative_vocab().clone(),
        0,
    )?;
    for lang in model.languages() {
        reference.register_language(lang, 0)?;
    }
    if reference.registry().len() != model.registry().len() {
        return Err(Error::CheckpointShape(format!(
            "{} parameters stored, model layout needs {}",
            model.registry().len(),
            reference.registry().len()
        )));
    }
    for (_, p) in reference.registry().iter() {
        let stored = model
            .registry()
            .by_name(&p.name)
            .map_err(|_| Error::CheckpointShape(format!("missing parameter {}", p.name)))?;
        if stored.value.shape() != p.value.shape() || stored.component != p.component {
            return Err(Error::CheckpointShape(format!(
                "{}: stored {:?} ({}), expected {:?} ({})",
                p.name,
                stored.value.shape(),
                stored.component,
                p.value.shape(),
                p.component
            )));
        }
    }
    Ok(())
}
