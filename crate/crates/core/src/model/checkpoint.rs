//! Checkpoint files: `DMSC` magic, format version, the model configuration
//! (plus optional training state) as length-prefixed TOML, every named
//! tensor with its shape and little-endian f64 payload, and a trailing CRC32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binary::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer and schedule position needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Steps completed.
    pub step: u64,
    pub lr: f64,
    /// Smoothed loss used by the plateau schedule.
    pub loss_ema: f64,
    pub best_loss: f64,
    pub steps_since_best: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train_state: Option<TrainState>,
}

/// Encodes `model` (and `state`) into checkpoint bytes.
pub fn encode(model: &Model, state: Option<&TrainState>) -> Result<Vec<u8>> {
    let header = Header {
        model: model.config.clone(),
        train_state: state.cloned(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&text)?;
    let entries = model.params.entries();
    w.len("parameter count", entries.len())?;
    for e in entries {
        w.str(&e.name)?;
        w.len("rank", e.tensor.rank())?;
        for &d in e.tensor.shape() {
            w.len("dimension", d)?;
        }
        w.f64s(e.tensor.data());
    }
    Ok(w.finish())
}

/// Decodes checkpoint bytes, rebuilding the network from its configuration.
pub fn decode(bytes: &[u8]) -> Result<(Model, Option<TrainState>)> {
    let mut r = Reader::checked(bytes, CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return r.fail(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        ));
    }
    let at = r.offset();
    let text = r.str("config")?;
    let header: Header = toml::from_str(&text).map_err(|e| Error::Format {
        offset: at,
        message: format!("bad config: {e}"),
    })?;
    let mut model = Model::build(&header.model, 0)?;
    let count = r.u32("parameter count")? as usize;
    if count != model.params.len() {
        return r.fail(format!(
            "checkpoint holds {count} tensors, configuration defines {}",
            model.params.len()
        ));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let at = r.offset();
        let name = r.str("parameter name")?;
        let Some(id) = model.params.id(&name) else {
            return Err(Error::Format {
                offset: at,
                message: format!("unknown parameter {name}"),
            });
        };
        if std::mem::replace(&mut seen[id.index()], true) {
            return r.fail(format!("parameter {name} appears twice"));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let tensor = model.params.get_mut(id);
        if shape != tensor.shape() {
            return r.fail(format!(
                "parameter {name} has shape {shape:?}, configuration expects {:?}",
                tensor.shape()
            ));
        }
        let data = r.f64s(tensor.numel(), "parameter data")?;
        tensor.data_mut().copy_from_slice(&data);
    }
    r.finish()?;
    Ok((model, header.train_state))
}

pub fn save(model: &Model, state: Option<&TrainState>, path: &Path) -> Result<()> {
    let bytes = encode(model, state)?;
    // Write-then-rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Option<TrainState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
