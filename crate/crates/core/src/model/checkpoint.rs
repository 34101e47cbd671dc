//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes   b"DCDCKPT1"
//! length    u64 LE    byte length of the JSON header
//! header    JSON      CheckpointHeader (config, seed, stage, metadata, tensor index)
//! payload   f64 LE    every tensor in index order, row-major
//! ```
//!
//! Values are stored as IEEE-754 binary64 regardless of the in-memory scalar,
//! so `save -> load` is bit-exact for both `f64` and `f32` models.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ModelParams, ParamSet, VisualProjection};
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DCDCKPT1";

/// A model, any number of named projections and the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub stage: String,
    pub seed: u64,
    pub metadata: serde_json::Value,
    pub model: ModelParams<S>,
    pub projections: BTreeMap<String, VisualProjection<S>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjectionEntry {
    name: String,
    visual_tokens: usize,
    d_model: usize,
    widths: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: u32,
    stage: String,
    seed: u64,
    config: ModelConfig,
    metadata: serde_json::Value,
    projections: Vec<ProjectionEntry>,
    tensors: Vec<TensorEntry>,
}

fn format_error(path: &str, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        reason: reason.into(),
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn projection(&self, name: &str) -> Option<&VisualProjection<S>> {
        self.projections.get(name)
    }

    fn all_tensors(&self) -> Vec<(String, &Array<S>)> {
        let mut out: Vec<(String, &Array<S>)> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("model.{n}"), t))
            .collect();
        for (pname, proj) in &self.projections {
            out.extend(
                proj.named_tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("projection.{pname}.{n}"), t)),
            );
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.all_tensors();
        let header = CheckpointHeader {
            format: 1,
            stage: self.stage.clone(),
            seed: self.seed,
            config: self.model.config.clone(),
            metadata: self.metadata.clone(),
            projections: self
                .projections
                .iter()
                .map(|(name, p)| ProjectionEntry {
                    name: name.clone(),
                    visual_tokens: p.visual_tokens,
                    d_model: p.d_model,
                    widths: p.widths(),
                })
                .collect(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in tensors {
            for x in t.data() {
                out.extend_from_slice(&x.widen().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(format_error(origin, "missing checkpoint magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format_error(origin, "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])?;
        if header.format != 1 {
            return Err(format_error(origin, format!("unsupported format {}", header.format)));
        }

        let mut model = ModelParams::<S>::zeros(&header.config)?;
        let mut projections = BTreeMap::new();
        for p in &header.projections {
            projections.insert(
                p.name.clone(),
                VisualProjection::zeros(p.visual_tokens, p.d_model, &p.widths),
            );
        }
        let skeleton = Checkpoint {
            stage: header.stage.clone(),
            seed: header.seed,
            metadata: serde_json::Value::Null,
            model: model.clone(),
            projections: projections.clone(),
        };
        let expected: Vec<(String, Vec<usize>)> = skeleton
            .all_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != header.tensors.len()
            || expected
                .iter()
                .zip(&header.tensors)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(format_error(origin, "tensor index does not match the configuration"));
        }

        let mut cursor = header_end;
        let mut targets: Vec<&mut Array<S>> = model.tensors_mut();
        for proj in projections.values_mut() {
            targets.extend(proj.tensors_mut());
        }
        for t in targets {
            for x in t.data_mut() {
                let chunk = bytes
                    .get(cursor..cursor + 8)
                    .ok_or_else(|| format_error(origin, "truncated payload"))?;
                *x = S::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
                cursor += 8;
            }
        }
        if cursor != bytes.len() {
            return Err(format_error(origin, "trailing bytes after payload"));
        }
        Ok(Checkpoint {
            stage: header.stage,
            seed: header.seed,
            metadata: header.metadata,
            model,
            projections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
