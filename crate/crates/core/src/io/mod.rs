//! Configuration, checkpoints and file persistence.

mod checkpoint;
mod commands;
mod config;

pub use checkpoint::{Checkpoint, CheckpointKind, Lineage};
pub use commands::{
    cmd_evaluate, cmd_generate, cmd_report, cmd_train, evaluation_cohort, generate_data, model_name, GeneratedData,
    TrainPhase, TrainSummary,
};
pub use config::{DatasetConfig, ExperimentConfig, ModelConfig};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
