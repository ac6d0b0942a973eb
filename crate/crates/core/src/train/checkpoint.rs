//! Checkpoints: model config, seed and step in the JSON header, every
//! parameter and buffer leaf in the `f32` blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{Container, ContainerError};
use crate::layers::{Model, ModelConfig};

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
}

pub fn checkpoint_container(model: &Model, seed: u64, step: u64) -> Container {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        seed,
        step,
    };
    let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(&meta).expect("meta serializes"));
    for (name, leaf) in model.params.leaves() {
        c.push(format!("params.{name}"), vec![leaf.len()], leaf);
    }
    for (name, leaf) in model.buffers.leaves() {
        c.push(format!("buffers.{name}"), vec![leaf.len()], leaf);
    }
    c
}

pub fn model_from_container(c: &Container) -> Result<(Model, CheckpointMeta), ContainerError> {
    c.expect_kind(CHECKPOINT_KIND)?;
    let meta: CheckpointMeta =
        serde_json::from_value(c.meta.clone()).map_err(|e| ContainerError::BadHeader(format!("checkpoint meta: {e}")))?;
    meta.config.validate_shapes().map_err(ContainerError::BadHeader)?;
    let mut model = Model::new(meta.config.clone(), 0);
    for (name, leaf) in model.params.leaves_mut() {
        let v = c.get_len(&format!("params.{name}"), leaf.len())?;
        leaf.copy_from_slice(&v);
    }
    for (name, leaf) in model.buffers.leaves_mut() {
        let v = c.get_len(&format!("buffers.{name}"), leaf.len())?;
        leaf.copy_from_slice(&v);
    }
    Ok((model, meta))
}

pub fn save_checkpoint(model: &Model, seed: u64, step: u64, path: &Path) -> Result<(), ContainerError> {
    checkpoint_container(model, seed, step).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), ContainerError> {
    model_from_container(&Container::read(path)?)
}
