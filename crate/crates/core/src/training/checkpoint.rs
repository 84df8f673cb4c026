//! Checkpoint directories: `weights.safetensors` plus `meta.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::nn::ParamStore;
use crate::{Error, Result};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// "teacher", "stage1", "stage2" or "stage3".
    pub stage: String,
    pub step: usize,
    pub seed: u64,
    pub config: RunConfig,
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    store.save(&dir.join(WEIGHTS_FILE))?;
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Reads `meta.json` only.
pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::config(format!("missing checkpoint at {} ({e}); run the preceding training stage first", dir.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Loads weights into `store` and returns the metadata.
pub fn load_checkpoint(dir: &Path, store: &ParamStore) -> Result<CheckpointMeta> {
    let meta = read_meta(dir)?;
    let weights = dir.join(WEIGHTS_FILE);
    if !weights.exists() {
        return Err(Error::config(format!("checkpoint {} has no {WEIGHTS_FILE}", dir.display())));
    }
    store.load(&weights)?;
    Ok(meta)
}
