// SPDX-License-Identifier: Apache-2.0

//! JSON checkpoints.
//!
//! ```json
//! {
//!   "format": "credal-checkpoint",
//!   "version": 1,
//!   "config": { "vocab_size": 64, ... },
//!   "tensors": [ { "name": "embedding", "shape": [64, 32], "data": [...] }, ... ]
//! }
//! ```
//!
//! Tensors appear in canonical order (see [`Weights::visit`]). Keys are
//! `embedding`, `layers.{i}.attn.{wq,wk,wv}.{h}`, `layers.{i}.attn.wo`,
//! `layers.{i}.norm1.{scale,bias}`, `layers.{i}.ffn.{w1,b1,w2,b2}`,
//! `layers.{i}.norm2.{scale,bias}`, `head.weight` and `head.bias`. Values
//! are written with shortest round-trip formatting, so a reload is exact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Weights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "credal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let tensors = self
            .params
            .named()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!("not a checkpoint: format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                file.version
            )));
        }
        let mut by_name: HashMap<String, NamedTensor> =
            file.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut params: Weights<Tensor> = ModelParams::zeros(&file.config)?;
        let mut failure = None;
        params.visit_mut(&mut |name, slot| {
            if failure.is_some() {
                return;
            }
            match by_name.remove(&name) {
                Some(t) if t.shape == slot.shape() => match Tensor::new(t.shape, t.data) {
                    Ok(v) => *slot = v,
                    Err(e) => failure = Some(e),
                },
                Some(t) => {
                    failure = Some(Error::Input(format!(
                        "tensor {name} has shape {:?}, config implies {:?}",
                        t.shape,
                        slot.shape()
                    )))
                }
                None => failure = Some(Error::Input(format!("checkpoint is missing tensor {name}"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Input(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(Self {
            config: file.config,
            params,
        })
    }
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let ck = Checkpoint {
        config: config.clone(),
        params: params.clone(),
    };
    fs::write(path, ck.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&fs::read_to_string(path)?)
}
