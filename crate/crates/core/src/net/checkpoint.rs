//! Checkpoints: every parameter block (including context tables and affine
//! pairs), batch-norm running statistics, and the optimizer state in one JSON
//! document with shape metadata. Loading into a freshly built preset and
//! resuming reproduces the uninterrupted run exactly.

use crate::error::{Error, Result};
use crate::net::adamw::AdamWState;
use crate::net::norm_layer::{NormKind, NormLayer};
use crate::net::{LayerKind, Net};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    pub blocks: Vec<CheckpointBlock>,
    pub running_stats: Vec<RunningStats>,
    pub optimizer: AdamWState,
}

pub fn save_checkpoint(net: &Net, optimizer: &AdamWState, epoch: usize) -> Checkpoint {
    let params = net.params_flat();
    let mut blocks = Vec::new();
    let mut offset = 0;
    for block in net.param_blocks() {
        blocks.push(CheckpointBlock {
            name: block.name,
            shape: block.shape,
            values: params[offset..offset + block.len].to_vec(),
        });
        offset += block.len;
    }
    let mut running_stats = Vec::new();
    for layer in &net.layers {
        if let LayerKind::Norm(NormLayer {
            kind: NormKind::Bn(state),
            ..
        }) = &layer.kind
        {
            running_stats.push(RunningStats {
                layer: layer.name.clone(),
                mean: state.running_mean.clone(),
                var: state.running_var.clone(),
            });
        }
    }
    Checkpoint {
        version: env!("CARGO_PKG_VERSION").to_string(),
        epoch,
        blocks,
        running_stats,
        optimizer: optimizer.clone(),
    }
}

/// Restore a checkpoint into a net built from the same preset spec; returns
/// the optimizer state and the completed-epoch count.
pub fn load_checkpoint(net: &mut Net, checkpoint: &Checkpoint) -> Result<(AdamWState, usize)> {
    let expected = net.param_blocks();
    if expected.len() != checkpoint.blocks.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameter blocks, network has {}",
            checkpoint.blocks.len(),
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(net.param_count());
    for (want, have) in expected.iter().zip(&checkpoint.blocks) {
        if want.name != have.name || want.shape != have.shape || have.values.len() != want.len {
            return Err(Error::Config(format!(
                "checkpoint block '{}' {:?} does not match network block '{}' {:?}",
                have.name, have.shape, want.name, want.shape
            )));
        }
        flat.extend_from_slice(&have.values);
    }
    net.set_params_flat(&flat)?;
    let mut stats = checkpoint.running_stats.iter();
    for layer in &mut net.layers {
        if let LayerKind::Norm(NormLayer {
            kind: NormKind::Bn(state),
            ..
        }) = &mut layer.kind
        {
            let entry = stats.next().ok_or_else(|| {
                Error::Config("checkpoint is missing batch-norm running statistics".into())
            })?;
            if entry.layer != layer.name || entry.mean.len() != state.channels() {
                return Err(Error::Config(format!(
                    "running statistics for '{}' do not match layer '{}'",
                    entry.layer, layer.name
                )));
            }
            state.running_mean.copy_from_slice(&entry.mean);
            state.running_var.copy_from_slice(&entry.var);
        }
    }
    if stats.next().is_some() {
        return Err(Error::Config(
            "checkpoint has extra running statistics".into(),
        ));
    }
    if checkpoint.optimizer.m.len() != net.param_count() {
        return Err(Error::Config(
            "optimizer state size does not match network".into(),
        ));
    }
    Ok((checkpoint.optimizer.clone(), checkpoint.epoch))
}

pub fn write_checkpoint_file(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string(checkpoint)?;
    crate::runner::emit::write_atomic(path, text.as_bytes())
}

pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
