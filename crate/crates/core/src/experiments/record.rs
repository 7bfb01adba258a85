use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, ExperimentConfig, ExperimentId};
use crate::error::Result;

/// Named output file, kept in memory until the run's single writer flushes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub path: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(path: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self { path: path.into(), bytes }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Content hashes that must agree across controlled variants.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub hashes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std, n }
    }
}

/// Mean/std per metric over the rows that completed.
pub fn aggregate(rows: &[SeedRow]) -> BTreeMap<String, Aggregate> {
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.error.is_none()) {
        for (k, v) in &row.metrics {
            values.entry(k.as_str()).or_default().push(*v);
        }
    }
    values.into_iter().map(|(k, v)| (k.to_string(), Aggregate::of(&v))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Non-gating checks are reported but do not affect `ok`.
    pub gating: bool,
    pub detail: String,
}

impl Check {
    pub fn gate(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, gating: true, detail: detail.into() }
    }

    pub fn info(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, gating: false, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub experiment: ExperimentId,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub rows: Vec<SeedRow>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub checks: Vec<Check>,
    /// All gating checks passed and every seed completed.
    pub ok: bool,
    /// At least one seed failed; aggregates cover the rest.
    pub partial: bool,
    /// Hash of rows, checks and artifact contents; excludes timing.
    pub output_hash: String,
    pub wall_clock_secs: f64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

pub(crate) fn output_hash(config_hash: &str, rows: &[SeedRow], checks: &[Check], artifacts: &[Artifact]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(config_hash.as_bytes());
    h.update(serde_json::to_vec(rows)?);
    h.update(serde_json::to_vec(checks)?);
    for a in artifacts {
        h.update(a.path.as_bytes());
        h.update((a.bytes.len() as u64).to_le_bytes());
        h.update(&a.bytes);
    }
    Ok(hex(&h.finalize()))
}

pub const RECORD_FILE: &str = "record.json";

impl RunRecord {
    /// Writes artifacts and `record.json` under `dir`.
    pub fn write(&self, dir: &Path, artifacts: &[Artifact]) -> Result<()> {
        fs::create_dir_all(dir)?;
        for a in artifacts {
            let path = dir.join(&a.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, &a.bytes)?;
        }
        fs::write(dir.join(RECORD_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(RECORD_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Outcome of re-checking a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub dir: PathBuf,
    pub record_ok: bool,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.problems.is_empty() && self.record_ok
    }
}

/// Recomputes aggregates from the per-seed rows, re-hashes the config and
/// checks that every listed artifact exists.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let record = RunRecord::load(dir)?;
    let mut problems = Vec::new();
    if record.config.hash() != record.config_hash {
        problems.push("config hash does not match the stored config".into());
    }
    let recomputed = aggregate(&record.rows);
    if recomputed.len() != record.aggregates.len() {
        problems.push(format!("{} aggregates stored, {} recomputed", record.aggregates.len(), recomputed.len()));
    }
    for (k, agg) in &recomputed {
        match record.aggregates.get(k) {
            None => problems.push(format!("aggregate {k} missing")),
            Some(stored) => {
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
                if stored.n != agg.n || !close(stored.mean, agg.mean) || !close(stored.std, agg.std) {
                    problems.push(format!("aggregate {k}: stored {stored:?}, recomputed {agg:?}"));
                }
            }
        }
    }
    let partial = record.rows.iter().any(|r| r.error.is_some());
    if partial != record.partial {
        problems.push("partial flag disagrees with per-seed errors".into());
    }
    let ok = !partial && record.checks.iter().all(|c| c.passed || !c.gating);
    if ok != record.ok {
        problems.push("ok flag disagrees with checks".into());
    }
    for a in &record.artifacts {
        if !dir.join(a).is_file() {
            problems.push(format!("artifact {a} missing"));
        }
    }
    Ok(VerifyReport { dir: dir.to_path_buf(), record_ok: record.ok, problems })
}
