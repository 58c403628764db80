//! Persistence: model files, run configuration and atomic file writes.

mod config;
mod model_file;

pub use config::{ArchConfig, RunConfig, SweepConfig};
pub use model_file::{
    decode_model, encode_model, load_model, save_model, SaveReport, TrainingMeta, FORMAT_VERSION, MAGIC,
};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Temporary path next to `path` used for write-then-rename.
pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Write `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}
