//! Artifact writers. Nothing here reads the clock or the environment, so
//! identical inputs give byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use aqsgd_core::protocol::StepMetrics;
use aqsgd_core::schema::{metrics_columns, metrics_record, METRICS_SCHEMA_VERSION};
use serde::Serialize;

use crate::config::DatasetSpec;

pub fn ensure_dir(dir: &Path) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), String> {
    let io = |e: csv::Error| format!("cannot write {}: {e}", path.display());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| format!("cannot write {}: {e}", path.display()))
}

pub fn write_metrics(path: &Path, boundaries: usize, metrics: &[StepMetrics]) -> Result<(), String> {
    write_csv(path, &metrics_columns(boundaries), metrics.iter().map(metrics_record))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: String,
    pub code_version: String,
    pub metrics_schema_version: u32,
    pub config: C,
    pub dataset: Option<DatasetSpec>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &str, config: C, dataset: Option<DatasetSpec>, seeds: Vec<u64>, outputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            metrics_schema_version: METRICS_SCHEMA_VERSION,
            config,
            dataset,
            seeds,
            outputs,
        }
    }
}
