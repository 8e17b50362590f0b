//! Dataset manifest: one JSON object per line. Paths are relative to the
//! manifest's directory unless absolute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub mask: PathBuf,
    pub image: PathBuf,
    pub label: u8,
    /// Overrides the mask's spacing sidecar when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_um: Option<f64>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    crate::write_file(path, text.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1)))?;
        if rec.label > maskvit_core::hvit::MAX_ISUP {
            return Err(CliError::format(path, format!("line {}: label {} above 5", i + 1, rec.label)));
        }
        rec.mask = base.join(&rec.mask);
        rec.image = base.join(&rec.image);
        out.push(rec);
    }
    Ok(out)
}
