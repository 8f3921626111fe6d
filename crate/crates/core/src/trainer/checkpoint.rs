use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunState, TrainConfig};
use crate::error::{Error, Result};

const FORMAT: &str = "udts-run";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: TrainConfig,
    state: RunState,
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &RunState) -> Result<()> {
    let ckpt = Checkpoint {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        state: state.clone(),
    };
    let text = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Load a run checkpoint. When `expected` is given, the stored
/// configuration must match it in everything but the epoch budget.
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<(TrainConfig, RunState)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ckpt.format != FORMAT {
        return Err(Error::Checkpoint(format!("not a run checkpoint: `{}`", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    ckpt.state.model.validate()?;
    if ckpt.state.records.len() != ckpt.state.epoch {
        return Err(Error::Checkpoint("record count differs from epoch counter".into()));
    }
    if let Some(expected) = expected {
        let stored = TrainConfig {
            epochs: expected.epochs,
            ..ckpt.config.clone()
        };
        if &stored != expected {
            return Err(Error::Checkpoint("checkpoint was written under a different configuration".into()));
        }
    }
    Ok((ckpt.config, ckpt.state))
}
