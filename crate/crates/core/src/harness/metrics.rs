//! CSV metrics files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

use super::train::{EpochStats, UpdateStats};

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to write".into()));
    }
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Writes `epoch,reward_mean,reward_stderr,loss,kl_estimate,max_abs_step_ratio,wall_ms`
/// with one row per epoch. Floats use the shortest round-trip form.
pub fn emit_metrics(stats: &[EpochStats], path: &Path) -> Result<()> {
    write_rows(stats, path)
}

pub fn parse_metrics(path: &Path) -> Result<Vec<EpochStats>> {
    read_rows(path)
}

/// Per-update diagnostics: loss, gradient norm, and the log-ratio
/// quantities that clipping controls.
pub fn emit_updates(updates: &[UpdateStats], path: &Path) -> Result<()> {
    write_rows(updates, path)
}

pub fn parse_updates(path: &Path) -> Result<Vec<UpdateStats>> {
    read_rows(path)
}
