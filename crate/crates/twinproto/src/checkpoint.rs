//! Checkpoint files: the byte layout of [`ModelState::to_bytes`] written verbatim.

use std::fs;
use std::path::Path;

use twinproto_core::model::{ModelConfig, ModelState};

use crate::error::{io, Result};

pub fn save(path: &Path, state: &ModelState) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, state.to_bytes()).map_err(io(path))
}

/// Loads a checkpoint, rejecting it if `expected` is given and the stored
/// configuration differs.
pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(io(path))?;
    Ok(match expected {
        Some(cfg) => ModelState::from_bytes_checked(&bytes, cfg)?,
        None => ModelState::from_bytes(&bytes)?,
    })
}
