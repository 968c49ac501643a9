//! Checkpoint directory: `manifest.json` plus `blob.bin`.
//!
//! The blob is a flat array of little-endian f64. The manifest lists every
//! distinct parameter once, sorted by name, with its shape and byte offset,
//! followed by the optimizer slots (`m` then `v`, each `numel` long) in the
//! same order. Tied and group-shared parameters are single entries.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, TrainablePartition};
use crate::optim::{LambState, Moments};
use crate::schedule::CheckpointMeta;

pub const FORMAT: &str = "mslt-checkpoint-1";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "blob.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotEntry {
    pub name: String,
    pub offset: u64,
    pub numel: usize,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub meta: CheckpointMeta,
    pub config: ModelConfig,
    pub depth: usize,
    pub seed: u64,
    pub partition: TrainablePartition,
    pub params: Vec<ParamEntry>,
    pub optimizer: Vec<SlotEntry>,
    pub blob_bytes: u64,
}

fn push(blob: &mut Vec<u8>, xs: &[f64]) -> u64 {
    let off = blob.len() as u64;
    for x in xs {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    off
}

/// Writes `model`, `state` and `meta` into directory `dir`.
pub fn save_checkpoint(dir: &Path, model: &Model, state: &LambState, meta: &CheckpointMeta) -> Result<()> {
    if !state.covers_trainable(&model.store) {
        return Err(Error::Checkpoint("optimizer state does not cover the trainable parameters".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut order: Vec<_> = model.store.iter().collect();
    order.sort_by(|a, b| a.1.name.cmp(&b.1.name));
    let mut blob = Vec::with_capacity(8 * model.store.num_scalars());
    let mut params = Vec::with_capacity(order.len());
    for (_, p) in &order {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset: push(&mut blob, &p.data),
            trainable: p.trainable(),
        });
    }
    let mut optimizer = Vec::new();
    for (id, p) in &order {
        if let Some(slot) = state.slots.get(id) {
            let offset = push(&mut blob, &slot.m);
            push(&mut blob, &slot.v);
            optimizer.push(SlotEntry {
                name: p.name.clone(),
                offset,
                numel: slot.m.len(),
                t: slot.t,
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        meta: meta.clone(),
        config: model.config.clone(),
        depth: model.depth(),
        seed: model.seed(),
        partition: model.partition().clone(),
        params,
        optimizer,
        blob_bytes: blob.len() as u64,
    };
    let mp = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&mp, json).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(BLOB);
    std::fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mp = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {:?}", m.format)));
    }
    Ok(m)
}

fn read_range(blob: &[u8], offset: u64, numel: usize, what: &str) -> Result<Vec<f64>> {
    let start = offset as usize;
    let end = start + 8 * numel;
    if !offset.is_multiple_of(8) || end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: bytes {start}..{end} fall outside the {}-byte blob",
            blob.len()
        )));
    }
    Ok(blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Model, LambState, CheckpointMeta)> {
    let manifest = read_manifest(dir)?;
    let bp = dir.join(BLOB);
    let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob holds {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut ranges: Vec<(u64, u64)> = Vec::new();
    let mut model = Model::skeleton(manifest.config.clone(), manifest.depth, manifest.seed)?;
    if manifest.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, the configured model {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for e in &manifest.params {
        let id = model
            .store
            .find(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        if model.store.get(id).shape != e.shape || !seen.insert(id) {
            return Err(Error::Checkpoint(format!("parameter {} has a mismatched shape or repeats", e.name)));
        }
        let n = model.store.get(id).numel();
        *model.store.data_mut(id) = read_range(&blob, e.offset, n, &e.name)?;
        ranges.push((e.offset, e.offset + 8 * n as u64));
    }
    model.set_partition(manifest.partition.clone())?;
    for e in &manifest.params {
        let id = model.store.find(&e.name).expect("checked above");
        if model.store.get(id).trainable() != e.trainable {
            return Err(Error::Checkpoint(format!("trainable flag of {} disagrees with the partition", e.name)));
        }
    }
    let mut state = LambState::default();
    for s in &manifest.optimizer {
        let id = model
            .store
            .find(&s.name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer slot for unknown parameter {}", s.name)))?;
        if s.numel != model.store.get(id).numel() {
            return Err(Error::Checkpoint(format!("optimizer slot {} has the wrong size", s.name)));
        }
        let m = read_range(&blob, s.offset, s.numel, &s.name)?;
        let v = read_range(&blob, s.offset + 8 * s.numel as u64, s.numel, &s.name)?;
        ranges.push((s.offset, s.offset + 16 * s.numel as u64));
        state.slots.insert(id, Moments { m, v, t: s.t });
    }
    ranges.sort_unstable();
    if ranges.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(Error::Checkpoint("manifest ranges overlap".into()));
    }
    if !state.covers_trainable(&model.store) {
        return Err(Error::Checkpoint("optimizer state does not cover the trainable parameters".into()));
    }
    Ok((model, state, manifest.meta))
}

/// SHA-256 over manifest and blob, for checking that readers leave a
/// checkpoint untouched.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [MANIFEST, BLOB] {
        let p = dir.join(name);
        h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
