//! Experiment registry: configs, per-seed runners, aggregation and run records.

mod chain;
mod config;
mod record;
mod runners;

use std::time::Instant;

use rayon::prelude::*;

pub use chain::{ChainSetup, UtdPoint};
pub use config::{CriticKind, CriticSpec, EnvSpec, ExperimentConfig, ExperimentId, Params, ScheduleSpec, SCHEMA_VERSION};
pub use record::{aggregate, verify, Aggregate, Artifact, Check, RunRecord, SeedRow, VerifyReport, RECORD_FILE};

use crate::error::Result;

/// Runs every seed of `cfg`, aggregates, evaluates the experiment's checks and,
/// if `cfg.out_dir` is set, writes the record and artifacts there.
///
/// A failing seed is recorded in its row and marks the run partial; the other
/// seeds still contribute to the aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let outcomes: Vec<_> = cfg.seeds.par_iter().map(|&seed| (seed, runners::run_seed(cfg, seed))).collect();
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut artifacts = Vec::new();
    for (seed, outcome) in outcomes {
        let row = match outcome {
            Ok(o) => {
                let bad: Vec<&String> = o.metrics.iter().filter(|(_, v)| !v.is_finite()).map(|(k, _)| k).collect();
                let error = (!bad.is_empty()).then(|| format!("non-finite metrics: {bad:?}"));
                if error.is_none() {
                    artifacts.extend(o.artifacts);
                }
                SeedRow { seed, metrics: o.metrics, hashes: o.hashes, error }
            }
            Err(e) => SeedRow { seed, error: Some(e.to_string()), ..SeedRow::default() },
        };
        rows.push(row);
    }
    let aggregates = aggregate(&rows);
    let (checks, extra) = runners::finish(cfg, &rows, &aggregates);
    artifacts.extend(extra);
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let partial = rows.iter().any(|r| r.error.is_some());
    let ok = !partial && checks.iter().all(|c| c.passed || !c.gating);
    let config_hash = cfg.hash();
    let output_hash = record::output_hash(&config_hash, &rows, &checks, &artifacts)?;
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.experiment,
        config_hash,
        config: cfg.clone(),
        rows,
        aggregates,
        checks,
        ok,
        partial,
        output_hash,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        artifacts: artifacts.iter().map(|a| a.path.clone()).collect(),
    };
    if let Some(dir) = &cfg.out_dir {
        record.write(dir, &artifacts)?;
    }
    Ok(record)
}
