use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffnet::NetParams;
use crate::error::{ensure, Result};
use crate::training::{
    probe_metrics, probe_seed, train_until, CriticModel, Interventions, Phase, RunState, Schedule, TargetKind, TrainingData,
    TrainingLog,
};

/// Trains `state` up to `freeze_at_step`, freezes `layers`, then continues to the end
/// of the schedule. Rows after the freeze are tagged [`Phase::PostFreeze`].
#[allow(clippy::too_many_arguments)]
pub fn freeze_and_continue(
    model: &dyn CriticModel,
    data: &TrainingData,
    schedule: &Schedule,
    interventions: &Interventions,
    state: &mut RunState,
    freeze_at_step: usize,
    layers: &[usize],
    log: &mut TrainingLog,
) -> Result<()> {
    ensure(freeze_at_step <= schedule.steps, || format!("freeze step {freeze_at_step} beyond schedule"))?;
    ensure(state.step <= freeze_at_step, || format!("run is already at step {}", state.step))?;
    let plain = Interventions { freeze: None, ..interventions.clone() };
    train_until(model, data, schedule, &plain, state, freeze_at_step, log)?;
    state.freeze(layers)?;
    train_until(model, data, schedule, &plain, state, schedule.steps, log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormPoint {
    pub step: usize,
    /// Penultimate and last hidden layernorm sites; `NaN` if the net has fewer sites.
    pub penultimate: f64,
    pub last: f64,
    pub mean_q: f64,
    pub target_kind: TargetKind,
    pub phase: Phase,
}

fn tail_pair(norms: &[f64]) -> (f64, f64) {
    match norms {
        [] => (f64::NAN, f64::NAN),
        [x] => (f64::NAN, *x),
        [.., a, b] => (*a, *b),
    }
}

/// Feature-norm series from the live training log.
pub fn feature_norm_series(log: &TrainingLog) -> Vec<FeatureNormPoint> {
    log.rows
        .iter()
        .map(|r| {
            let (penultimate, last) = tail_pair(&r.feature_norms);
            FeatureNormPoint {
                step: r.step,
                penultimate,
                last,
                mean_q: r.mean_q_probe,
                target_kind: r.target_kind,
                phase: r.phase,
            }
        })
        .collect()
}

/// Recomputes the series from stored checkpoints; matches live logging for the
/// same run seed and evaluation sample count.
pub fn replay_feature_norms(
    model: &dyn CriticModel,
    checkpoints: &[(usize, NetParams)],
    data: &TrainingData,
    eval_samples: usize,
    run_seed: u64,
) -> Result<Vec<FeatureNormPoint>> {
    checkpoints
        .iter()
        .map(|(step, params)| {
            let (mean_q, norms) = probe_metrics(model, params, data, eval_samples, probe_seed(run_seed, *step))?;
            let (penultimate, last) = tail_pair(&norms);
            Ok(FeatureNormPoint {
                step: *step,
                penultimate,
                last,
                mean_q,
                target_kind: data.target_kind,
                phase: Phase::PreFreeze,
            })
        })
        .collect()
}

/// CSV: `step,penultimate_norm,last_norm,mean_q,target_kind,phase`.
pub fn write_feature_norm_csv<W: Write>(points: &[FeatureNormPoint], mut w: W) -> Result<()> {
    writeln!(w, "step,penultimate_norm,last_norm,mean_q,target_kind,phase")?;
    for p in points {
        writeln!(w, "{},{},{},{},{},{}", p.step, p.penultimate, p.last, p.mean_q, p.target_kind, p.phase)?;
    }
    Ok(())
}
