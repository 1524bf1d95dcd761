//! Checkpoint directories: `manifest.json` plus a little-endian `f32` blob.
//!
//! The manifest indexes every tensor as `{name, shape, dtype, offset,
//! length}` with byte offsets into `weights.bin`; tensors are concatenated
//! row-major in index order. LM checkpoints and discriminators share this
//! container and differ only in `kind`, `config`, and the optional `vocab`
//! and `class_names` fields.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{LmParams, TransformerLm};
use super::tokenizer::{Tokenizer, TokenizerKind, WordVocab};
use super::LmConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `tensors` (cast to `f32`) and a manifest built from `template`,
/// whose `tensors` field is replaced.
pub fn write_archive<S: Scalar>(dir: &Path, template: Manifest, tensors: &[(String, &Tensor<S>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = Manifest { tensors: entries, ..template };
    fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a checkpoint directory, validating every index entry against
/// the blob.
pub fn read_archive(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor<f32>)>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingPath(manifest_path));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let fail = |reason: String| Error::Format { tensor: e.name.clone(), reason };
        if e.dtype != "f32" {
            return Err(fail(format!("unsupported dtype {}", e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        if count * 4 != e.length {
            return Err(fail(format!("shape {:?} needs {} bytes, index says {}", e.shape, count * 4, e.length)));
        }
        let end = e.offset.checked_add(e.length).ok_or_else(|| fail("offset overflow".into()))?;
        if end > blob.len() {
            return Err(fail(format!("blob is {} bytes, tensor ends at {end}", blob.len())));
        }
        let data = blob[e.offset..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data).map_err(|err| fail(err.to_string()))?));
    }
    Ok((manifest, out))
}

impl<S: Scalar> TransformerLm<S> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let names = LmParams::<S>::manifest(self.config());
        let tensors: Vec<(String, &Tensor<S>)> =
            names.into_iter().zip(self.params().tensors()).map(|((name, _), t)| (name, t.as_ref())).collect();
        let template = Manifest {
            kind: "lm".into(),
            config: serde_json::to_value(self.config())?,
            vocab: self.tokenizer().vocab_words().map(<[String]>::to_vec),
            class_names: Vec::new(),
            tensors: Vec::new(),
        };
        write_archive(dir, template, &tensors)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = read_archive(dir)?;
        if manifest.kind != "lm" {
            return Err(Error::Format {
                tensor: "<manifest>".into(),
                reason: format!("kind `{}` is not lm", manifest.kind),
            });
        }
        let config: LmConfig = serde_json::from_value(manifest.config.clone())?;
        let tokenizer = match (config.tokenizer_kind, manifest.vocab) {
            (TokenizerKind::Byte, _) => Tokenizer::Byte,
            (TokenizerKind::Word, Some(words)) => Tokenizer::Word(WordVocab::from_words(words)),
            (TokenizerKind::Word, None) => {
                return Err(Error::Format {
                    tensor: "<manifest>".into(),
                    reason: "word tokenizer without vocab".into(),
                })
            }
        };
        let expected = LmParams::<S>::manifest(&config);
        let mut by_name: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Format { tensor: name.clone(), reason: "missing from checkpoint".into() })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format {
                    tensor: name.clone(),
                    reason: format!("shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            ordered.push(t.cast::<S>());
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format { tensor: extra.clone(), reason: "not part of this architecture".into() });
        }
        let params = LmParams::from_ordered(&config, ordered)?;
        Self::new(config, tokenizer, params)
    }
}
