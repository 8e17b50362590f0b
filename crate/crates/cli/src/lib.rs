//! File formats, experiment runner and command-line plumbing around
//! `maskvit-core`.

pub mod checkpoint;
mod codec;
pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod report;

use std::path::Path;

pub use error::{CliError, Result};

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
