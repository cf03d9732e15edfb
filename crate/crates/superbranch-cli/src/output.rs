//! Artifact emission: CSV tables and one structured summary document per
//! run. All floating-point output carries 17 significant digits so files
//! round-trip exactly, and nothing here depends on wall-clock time, so
//! identical inputs produce byte-identical artifacts.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

/// Round-trip exact float formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub subcommand: String,
    pub scenario_id: String,
    pub model: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub sigma_budget: f64,
    pub bias_budget: f64,
    pub truncated_replicates: Vec<TruncationNote>,
    pub verdicts: Vec<VerdictRow>,
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct TruncationNote {
    pub k: u64,
    pub replicates: Vec<u32>,
}

#[derive(Debug, Serialize)]
pub struct VerdictRow {
    pub k: u64,
    pub t: f64,
    pub f_id: String,
    pub empirical: f64,
    pub stderr: f64,
    pub theoretical: f64,
    pub z_score: Option<f64>,
    pub pass: bool,
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let body = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, body.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
