//! Run directories. Everything is written into a hidden temporary directory
//! next to the destination and renamed into place once complete, so a reader
//! never sees a half-written run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ScenarioConfig;
use super::run::{config_hash, RunRecord, Table};
use crate::error::{Error, Result};

/// `<scenario>-<first 8 hex digits of the config hash>-s<seed>`.
pub fn run_dir_name(cfg: &ScenarioConfig) -> String {
    format!("{}-{}-s{}", cfg.scenario.name(), &config_hash(cfg)[..8], cfg.seed)
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn table_csv(table: &Table) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn rows_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io(dir, e))?;
    tmp.write_all(contents).map_err(|e| io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io(path, e))?;
    tmp.persist(path).map_err(|e| io(path, e.error))?;
    Ok(())
}

/// Materialises a directory: `fill` populates a fresh staging directory,
/// which then replaces `dest`.
pub fn stage_dir(dest: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
    let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    let staging = tempfile::Builder::new().prefix(".staging-").tempdir_in(parent).map_err(|e| io(parent, e))?;
    fill(staging.path())?;
    if dest.exists() {
        fs::remove_dir_all(dest).map_err(|e| io(dest, e))?;
    }
    let staged = staging.keep();
    fs::rename(&staged, dest).map_err(|e| io(dest, e))?;
    Ok(dest.to_path_buf())
}

/// Writes the files of one run into `dir`, which must already exist.
pub fn write_run_files(dir: &Path, cfg: &ScenarioConfig, record: &RunRecord) -> Result<()> {
    let put = |name: &str, bytes: &[u8]| fs::write(dir.join(name), bytes).map_err(|e| io(&dir.join(name), e));
    put("config.resolved", cfg.to_toml().as_bytes())?;
    put("metrics.csv", &rows_csv(&record.metrics)?)?;
    if let Some(f) = &record.fields {
        put("fields.csv", &table_csv(f)?)?;
    }
    if let Some(t) = &record.trajectory {
        put("trajectory.csv", &rows_csv(t)?)?;
    }
    for (name, table) in &record.tables {
        put(&format!("{name}.csv"), &table_csv(table)?)?;
    }
    let mut summary = serde_json::to_vec_pretty(&record.summary)?;
    summary.push(b'\n');
    put("summary.json", &summary)?;
    Ok(())
}

/// Writes a complete run directory under `out` and returns its path.
pub fn write_run(out: &Path, cfg: &ScenarioConfig, record: &RunRecord) -> Result<PathBuf> {
    stage_dir(&out.join(run_dir_name(cfg)), |dir| write_run_files(dir, cfg, record))
}
