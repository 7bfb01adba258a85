use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::chain::{
    dataset_q_stats, oracle_score, schedule, start_run, steps_to_fraction, train_tracked, utd_loop, ChainSetup, Critic,
};
use super::config::{ExperimentConfig, ExperimentId};
use super::record::{Aggregate, Artifact, Check, SeedRow};
use crate::envlab::{collect_dataset, Policy};
use crate::error::{ensure, Result};
use crate::flowcritic::FlowLoss;
use crate::lintheory::{
    beta_coefficients, ensemble_flow, flow_derivative, gain_rhs, integrate_flow, mean_predictor, mono_flow, slice_flow_rhs,
    slice_moments, unroll_predictor, FlowOptions, FlowStatus, LinearFlowModel, TargetProcess, TargetSchedule,
};
use crate::probes::{
    audit_conic, containment_trials, evaluate_flow_policy, evaluate_mono_policy, feature_norm_series, fit_ttr_exponent,
    freeze_and_continue, mono_staleness_analog, replay_feature_norms, staleness_probe, write_feature_norm_csv, AuditGrid,
    ConicRegion,
};
use crate::training::{train, Interventions, TargetKind};

#[derive(Debug, Default)]
pub(crate) struct SeedOutcome {
    pub metrics: BTreeMap<String, f64>,
    pub hashes: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
}

impl SeedOutcome {
    fn put(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    fn flag(&mut self, key: impl Into<String>, value: bool) {
        self.put(key, if value { 1.0 } else { 0.0 });
    }
}

pub(crate) fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    match cfg.experiment {
        ExperimentId::TdOracle => td_oracle(cfg, seed),
        ExperimentId::DistVsExpected => dist_vs_expected(cfg, seed),
        ExperimentId::Staleness => staleness(cfg, seed),
        ExperimentId::TargetNoise => target_noise(cfg, seed),
        ExperimentId::Freeze => freeze(cfg, seed),
        ExperimentId::FeatureNorms => feature_norms(cfg, seed),
        ExperimentId::TtrScaling => ttr_scaling(cfg, seed),
        ExperimentId::ConicAudit => conic_audit(cfg, seed),
        ExperimentId::PredictTargetAblation | ExperimentId::SingleStepAblation => compare_critics(cfg, seed),
        ExperimentId::LinearTheory => linear_theory(cfg, seed),
        ExperimentId::EnsembleCollapse => ensemble_collapse(cfg, seed),
        ExperimentId::UtdSweep => utd_sweep(cfg, seed),
    }
}

fn td_oracle(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let setup = ChainSetup::new(&cfg.env)?;
    let data = setup.training_data(TargetKind::TdGreedy)?;
    let sched = schedule(&cfg.schedule);
    let mut out = SeedOutcome::default();
    let mut csv = String::from("critic,step,oracle_error\n");
    for spec in &cfg.critics {
        let critic = Critic::build(spec, &setup);
        let model = critic.model();
        let mut run = start_run(model, &data, seed)?;
        let s = &cfg.schedule;
        let iv = Interventions::default();
        train_tracked(
            model,
            &setup,
            &data,
            &sched,
            &iv,
            &mut run,
            s.steps,
            s.eval_every,
            s.early_stop,
            cfg.params.eval_integrations,
        )?;
        let name = spec.name();
        for (step, err) in &run.curve {
            writeln!(csv, "{name},{step},{err}").unwrap();
        }
        out.put(format!("{name}.final_error"), run.final_error());
        out.flag(format!("{name}.converged"), run.final_error() < cfg.params.oracle_threshold);
        out.put(format!("{name}.steps"), run.state.step as f64);
    }
    out.artifacts.push(Artifact::new(format!("seed{seed}/curves.csv"), csv.into_bytes()));
    Ok(out)
}

fn dist_vs_expected(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let setup = ChainSetup::new(&cfg.env)?;
    let sched = schedule(&cfg.schedule);
    let spec_eval = setup.eval_spec(cfg, seed);
    let mut out = SeedOutcome::default();
    for spec in &cfg.critics {
        let data = setup.training_data(TargetKind::TdGreedy)?;
        let name = spec.name();
        out.hashes.insert(format!("{name}.data"), setup.data_hash()?);
        let critic = Critic::build(spec, &setup);
        let model = critic.model();
        let mut run = start_run(model, &data, seed)?;
        let steps = cfg.schedule.steps;
        train_tracked(
            model,
            &setup,
            &data,
            &sched,
            &Interventions::default(),
            &mut run,
            steps,
            steps,
            None,
            cfg.params.eval_integrations,
        )?;
        let eval = super::chain::evaluate_policy(model, &run.state.params, &setup, &spec_eval)?;
        let (mean_q, var_z, oracle_mean) =
            dataset_q_stats(model, &run.state.params, &setup, cfg.params.variance_draws, seed.wrapping_add(17))?;
        out.put(format!("{name}.success"), eval.success_rate);
        out.put(format!("{name}.mean_q"), mean_q);
        out.put(format!("{name}.var_z"), var_z);
        out.put(format!("{name}.mean_q_error"), (mean_q - oracle_mean).abs());
        out.put(format!("{name}.final_error"), run.final_error());
    }
    Ok(out)
}

fn staleness(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let setup = ChainSetup::new(&cfg.env)?;
    let data = setup.training_data(TargetKind::TdGreedy)?;
    let sched = schedule(&cfg.schedule);
    let spec_eval = setup.eval_spec(cfg, seed);
    let stale_at = ((cfg.params.stale_fraction * cfg.schedule.steps as f64).round() as usize).max(1);
    let mut out = SeedOutcome::default();
    for spec in &cfg.critics {
        let critic = Critic::build(spec, &setup);
        let model = critic.model();
        let mut run = start_run(model, &data, seed)?;
        let (n, every) = (cfg.params.eval_integrations, cfg.schedule.eval_every);
        let iv = Interventions::default();
        train_tracked(model, &setup, &data, &sched, &iv, &mut run, stale_at, every, None, n)?;
        let stale = run.state.params.clone();
        train_tracked(model, &setup, &data, &sched, &iv, &mut run, cfg.schedule.steps, every, None, n)?;
        let current = &run.state.params;
        let name = spec.name();
        let (fresh, old) = match &critic {
            Critic::Flow(f) => (
                evaluate_flow_policy(&setup.mdp, f, current, &spec_eval)?,
                evaluate_flow_policy(&setup.mdp, f, &stale, &spec_eval)?,
            ),
            Critic::Mono(_) => {
                (evaluate_mono_policy(&setup.mdp, current, &spec_eval)?, evaluate_mono_policy(&setup.mdp, &stale, &spec_eval)?)
            }
        };
        for &k in &cfg.params.staleness_pct {
            let r = match &critic {
                Critic::Flow(f) => staleness_probe(&setup.mdp, f, current, &stale, k, &spec_eval)?,
                Critic::Mono(_) => mono_staleness_analog(&setup.mdp, current, &stale, k, &spec_eval)?,
            };
            out.put(format!("{name}.success_k{k}"), r.success_rate);
            out.put(format!("{name}.return_k{k}"), r.mean_return);
            if k == 0 {
                out.flag(format!("{name}.k0_matches_current"), r == fresh);
            }
            if k == 100 {
                out.flag(format!("{name}.k100_matches_stale"), r == old);
            }
        }
        out.put(format!("{name}.final_error"), run.final_error());
    }
    Ok(out)
}

fn kappa_label(k: f64) -> String {
    format!("k{k}")
}

fn target_noise(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let setup = ChainSetup::new(&cfg.env)?;
    let data = setup.training_data(TargetKind::TdGreedy)?;
    let sched = schedule(&cfg.schedule);
    let mut out = SeedOutcome::default();
    for spec in &cfg.critics {
        let critic = Critic::build(spec, &setup);
        let model = critic.model();
        let name = spec.name();
        let mut errors = Vec::new();
        for &k in &cfg.params.kappas {
            let iv = Interventions { target_noise: k * setup.q_range, freeze: None };
            let mut run = start_run(model, &data, seed)?;
            let steps = cfg.schedule.steps;
            train_tracked(model, &setup, &data, &sched, &iv, &mut run, steps, steps, None, cfg.params.eval_integrations)?;
            out.put(format!("{name}.error_{}", kappa_label(k)), run.final_error());
            errors.push(run.final_error());
        }
        out.put(format!("{name}.degradation"), errors.last().unwrap() - errors[0]);
    }
    Ok(out)
}

fn freeze(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let setup = ChainSetup::new(&cfg.env)?;
    let data = setup.training_data(TargetKind::TdGreedy)?;
    let sched = schedule(&cfg.schedule);
    let freeze_at = (cfg.params.freeze_fraction * cfg.schedule.steps as f64).round() as usize;
    let mut out = SeedOutcome::default();
    for spec in &cfg.critics {
        let critic = Critic::build(spec, &setup);
        let model = critic.model();
        let name = spec.name();
        let mut run = start_run(model, &data, seed)?;
        let iv = Interventions::default();
        let n = cfg.params.eval_integrations;
        train_tracked(model, &setup, &data, &sched, &iv, &mut run, freeze_at, cfg.schedule.eval_every, None, n)?;
        let pre = oracle_score(model, &run.state.params, &setup, n, seed, run.state.step)?;
        let n_layers = run.state.params.n_layers();
        ensure(n_layers > cfg.params.trainable_tail, || format!("{name}: {n_layers} layers, nothing left to freeze"))?;
        let layers: Vec<usize> = (0..n_layers - cfg.params.trainable_tail).collect();
        freeze_and_continue(model, &data, &sched, &iv, &mut run.state, freeze_at, &layers, &mut run.log)?;
        let post = oracle_score(model, &run.state.params, &setup, n, seed, run.state.step)?;
        out.put(format!("{name}.pre_freeze_error"), pre);
        out.put(format!("{name}.post_freeze_error"), post);
        out.put(format!("{name}.frozen_layers"), layers.len() as f64);
        let mut csv = Vec::new();
        run.log.write_csv(&mut csv)?;
        out.artifacts.push(Artifact::new(format!("seed{seed}/{name}_log.csv"), csv));
    }
    Ok(out)
}

fn feature_norms(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let setup = ChainSetup::new(&cfg.env)?;
    let mut sched = schedule(&cfg.schedule);
    sched.checkpoint_every = Some(sched.log_every);
    let mut out = SeedOutcome::default();
    for spec in &cfg.critics {
        let critic = Critic::build(spec, &setup);
        let model = critic.model();
        let name = spec.name();
        for kind in [TargetKind::TdGreedy, TargetKind::MonteCarlo] {
            let data = setup.training_data(kind)?;
            let run = train(model, &data, &sched, &Interventions::default(), seed)?;
            let live = feature_norm_series(&run.log);
            let replay = replay_feature_norms(model, &run.log.checkpoints, &data, sched.eval_samples, seed)?;
            ensure(live.len() == replay.len(), || "checkpoint cadence must match the log cadence".into())?;
            let diff = live
                .iter()
                .zip(&replay)
                .map(|(a, b)| (a.penultimate - b.penultimate).abs().max((a.last - b.last).abs()).max((a.mean_q - b.mean_q).abs()))
                .fold(0.0, f64::max);
            let last = live.last().expect("at least one log row");
            let prefix = format!("{name}.{kind}");
            out.put(format!("{prefix}.penultimate"), last.penultimate);
            out.put(format!("{prefix}.last"), last.last);
            out.put(format!("{prefix}.mean_q"), last.mean_q);
            out.put(format!("{prefix}.replay_diff"), diff);
            let mut csv = Vec::new();
            write_feature_norm_csv(&live, &mut csv)?;
            out.artifacts.push(Artifact::new(format!("seed{seed}/{name}_{kind}.csv"), csv));
        }
    }
    Ok(out)
}

const FIELD_TARGET: f64 = 5.0;
const FIELD_NOISE: (f64, f64) = (3.0, 7.0);

fn ttr_scaling(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let p = &cfg.params;
    let mut out = SeedOutcome::default();
    for &c in &p.ttr_c {
        let mut field = |z: f64, t: f64| c * (FIELD_TARGET - z) / (1.0 - t);
        let rep = fit_ttr_exponent(&mut field, FIELD_NOISE, &p.ttr_k, p.ttr_trials, p.ttr_bound, seed)?;
        out.put(format!("c{c}.exponent"), rep.exponent);
        out.put(format!("c{c}.constant"), rep.constant);
        let mut csv = Vec::new();
        rep.write_csv(&mut csv)?;
        out.artifacts.push(Artifact::new(format!("seed{seed}/ttr_c{c}.csv"), csv));
    }
    let rep = fit_ttr_exponent(&mut |_z: f64, _t: f64| 1.3, FIELD_NOISE, &p.ttr_k, p.ttr_trials, p.ttr_bound, seed)?;
    out.put("constant.exponent", rep.exponent);
    Ok(out)
}

fn conic_audit(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let p = &cfg.params;
    let (l, u) = FIELD_NOISE;
    // output band three quarters as wide as the noise band, centred on the target
    let half = 0.75 * 0.5 * (u - l);
    let region = ConicRegion::new(l, u, FIELD_TARGET - half, FIELD_TARGET + half, p.conic_steps)?;
    let grid = AuditGrid::square(p.conic_grid, p.conic_eps_g);
    let mut out = SeedOutcome::default();
    let mut exact = |z: f64, t: f64| (FIELD_TARGET - z) / (1.0 - t);
    let mut constant = |_z: f64, _t: f64| 1.3;
    let mut halfway = |z: f64, t: f64| 0.5 * (FIELD_TARGET - z) / (1.0 - t);
    for c in [0.5, 0.9] {
        out.put(format!("exact.c{c}.fraction"), audit_conic(&mut exact, &region, c, &grid)?.violation_fraction);
    }
    out.put("constant.c0.5.fraction", audit_conic(&mut constant, &region, 0.5, &grid)?.violation_fraction);
    let low = audit_conic(&mut halfway, &region, 0.4, &grid)?;
    let high = audit_conic(&mut halfway, &region, 0.6, &grid)?;
    out.put("half.c0.4.fraction", low.violation_fraction);
    out.put("half.c0.6.fraction", high.violation_fraction);
    out.flag("half.boundary_ok", low.boundary_ok);
    out.put("half.delta_g", low.delta_g);
    out.flag("half.monotone_in_c", low.violation_fraction <= high.violation_fraction);
    if low.boundary_ok {
        let bound = 0.5 * low.delta_g;
        let rep = containment_trials(&mut halfway, &region, bound, p.containment_trials, seed)?;
        out.put("half.containment_bound", bound);
        out.put("half.containment_exits", rep.exits as f64);
        out.put("half.containment_trials", rep.trials as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empirical = ConicRegion::empirical(&mut halfway, l, u, p.conic_steps, 1000, &mut rng)?;
    out.flag("half.empirical_region_boundary_ok", audit_conic(&mut halfway, &empirical, 0.4, &grid)?.boundary_ok);
    if Some(&seed) == cfg.seeds.first() {
        let mut csv = Vec::new();
        high.write_csv(&mut csv)?;
        out.artifacts.push(Artifact::new("conic_half_c0.6.csv", csv));
    }
    Ok(out)
}

fn compare_critics(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let setup = ChainSetup::new(&cfg.env)?;
    let data = setup.training_data(TargetKind::TdGreedy)?;
    let sched = schedule(&cfg.schedule);
    let spec_eval = setup.eval_spec(cfg, seed);
    let mut out = SeedOutcome::default();
    let mut csv = String::from("critic,step,oracle_error\n");
    for spec in &cfg.critics {
        let critic = Critic::build(spec, &setup);
        let model = critic.model();
        let name = spec.name();
        let mut run = start_run(model, &data, seed)?;
        let s = &cfg.schedule;
        let iv = Interventions::default();
        train_tracked(model, &setup, &data, &sched, &iv, &mut run, s.steps, s.eval_every, None, cfg.params.eval_integrations)?;
        for (step, err) in &run.curve {
            writeln!(csv, "{name},{step},{err}").unwrap();
        }
        let eval = super::chain::evaluate_policy(model, &run.state.params, &setup, &spec_eval)?;
        out.put(format!("{name}.final_error"), run.final_error());
        out.put(format!("{name}.success"), eval.success_rate);
    }
    out.artifacts.push(Artifact::new(format!("seed{seed}/curves.csv"), csv.into_bytes()));
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// `d + 1` random support points with random probabilities.
fn random_points(rng: &mut ChaCha8Rng, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = d + 1;
    let points = (0..n).map(|_| random_vec(rng, d, 1.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut prob: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let head: f64 = prob[..n - 1].iter().sum();
    prob[n - 1] = 1.0 - head;
    (points, prob)
}

/// Two-point process with a target step `1 -> 2` on the first point.
fn step_process() -> Result<TargetProcess> {
    TargetProcess::new(
        vec![vec![1.0, 0.0], vec![0.3, 1.0]],
        vec![0.5, 0.5],
        TargetSchedule::Step { before: vec![1.0, 0.5], after: vec![2.0, 1.0], at: 1.0 },
    )
}

fn linear_theory(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let p = &cfg.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SeedOutcome::default();
    let (mut closed_form, mut gain) = (0.0f64, 0.0f64);
    for i in 0..p.lin_models {
        let model = LinearFlowModel::random(p.lin_t, p.lin_dim, 1.0, 1.0, seed.wrapping_mul(1000).wrapping_add(i as u64))?;
        let x = random_vec(&mut rng, p.lin_dim, 1.0);
        let z = rng.gen_range(-2.0..2.0);
        let closed = mean_predictor(&model, &x) + model.noise_gain() * z;
        let direct = unroll_predictor(&model, &x, z);
        closed_form = closed_form.max((closed - direct).abs() / (1.0 + direct.abs()));
        let (points, prob) = random_points(&mut rng, p.lin_dim);
        let y = random_vec(&mut rng, points.len(), 2.0);
        let process = TargetProcess::new(points, prob, TargetSchedule::Constant(y.clone()))?;
        let mo = process.moments(&y);
        for j in 0..model.n_slices() {
            let (a, b) = slice_moments(&model, j, &mo);
            let w: Vec<f64> = model.u[j].iter().copied().chain([model.v[j]]).collect();
            let full = slice_flow_rhs(&w, &a, &b)?;
            let g = gain_rhs(&model, j, &mo);
            gain = gain.max((g - full[p.lin_dim]).abs() / (1.0 + g.abs()));
        }
    }
    out.put("closed_form.max_rel_error", closed_form);
    out.put("gain.max_rel_error", gain);

    // beta_dot and the decomposition identity along an integrated trajectory
    let (points, prob) = random_points(&mut rng, p.lin_dim);
    let base = random_vec(&mut rng, points.len(), 2.0);
    let amplitude = random_vec(&mut rng, points.len(), 1.0);
    let process = TargetProcess::new(points, prob, TargetSchedule::Sinusoid { base, amplitude, period: 2.0 })?;
    let model0 = LinearFlowModel::random(p.lin_t, p.lin_dim, 0.5, 1.0, seed)?;
    let opts = FlowOptions { horizon: p.lin_horizon, dt: 0.05, ..FlowOptions::default() };
    let tr = integrate_flow(&model0, &process, &opts, false, false)?;
    ensure(tr.status == FlowStatus::Completed, || format!("trajectory did not complete: {:?}", tr.status))?;
    let (mut beta_err, mut decomp_err, mut last_beta_dot) = (0.0f64, 0.0f64, 0.0f64);
    let eps = 1e-6;
    let stride = (tr.times.len() / 25).max(1);
    for i in (0..tr.times.len()).step_by(stride) {
        let (model, rec) = (&tr.models[i], &tr.records[i]);
        let targets = process.targets(tr.times[i], tr.times[i], &|_| 0.0);
        let deriv = flow_derivative(model, &process.moments(&targets), false, false);
        let shifted = |s: f64| {
            let mut m = model.clone();
            let st: Vec<f64> = model.to_state().iter().zip(&deriv).map(|(x, d)| x + s * d).collect();
            m.set_state(&st);
            m
        };
        let (plus, minus) = (shifted(eps), shifted(-eps));
        let (bp, bm) = (beta_coefficients(&plus), beta_coefficients(&minus));
        for k in 0..rec.beta.len() {
            beta_err = beta_err.max(((bp[k] - bm[k]) / (2.0 * eps) - rec.beta_dot[k]).abs());
        }
        let (wp, wm) = (plus.effective_weight(), minus.effective_weight());
        for k in 0..p.lin_dim {
            let fd = (wp[k] - wm[k]) / (2.0 * eps);
            decomp_err = decomp_err.max((fd - rec.feature_learning[k] - rec.reweighting[k]).abs());
        }
        last_beta_dot = last_beta_dot.max(rec.beta_dot.last().unwrap().abs());
    }
    out.put("beta_dot.max_fd_error", beta_err);
    out.put("decomposition.max_fd_error", decomp_err);
    out.put("beta_dot.last_slice_max", last_beta_dot);

    // frozen features, moving target
    let process = step_process()?;
    let model = LinearFlowModel::new(8, vec![vec![1.0, 0.5]; 7], vec![0.0; 7], 1.0)?;
    let tr = integrate_flow(&model, &process, &FlowOptions { horizon: 6.0, dt: 0.05, ..FlowOptions::default() }, true, false)?;
    let at = tr.times.iter().position(|t| *t == 1.0).expect("grid contains the target step");
    out.put("frozen_features.flow_change", (tr.predictions.last().unwrap() - tr.predictions[at]).abs());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let fl: f64 = tr.records.iter().map(|r| norm(&r.feature_learning)).sum();
    let rw: f64 = tr.records.iter().map(|r| norm(&r.reweighting)).sum();
    out.put("frozen_features.feature_learning_total", fl);
    out.put("frozen_features.reweighting_share", if fl + rw > 0.0 { rw / (fl + rw) } else { 0.0 });
    out.put("frozen_features.max_wdot", tr.records.iter().map(|r| norm(&r.w_eff_dot)).fold(0.0, f64::max));
    let mono = mono_flow(&[0.2, -0.1], &process, &FlowOptions { horizon: 6.0, dt: 0.05, ..FlowOptions::default() }, true)?;
    let mono_change = mono.predictions.iter().map(|q| (q - mono.predictions[0]).abs()).fold(0.0, f64::max);
    out.put("frozen_features.mono_change", mono_change);
    let mut csv = Vec::new();
    tr.write_csv(&mut csv)?;
    out.artifacts.push(Artifact::new(format!("seed{seed}/frozen_features_trajectory.csv"), csv));

    let (gap, frozen_change) = ensemble_check(&mut rng, p.ensemble_members, 2, &process, p.lin_horizon)?;
    out.put("ensemble.max_gap", gap);
    out.put("ensemble.frozen_change", frozen_change);
    Ok(out)
}

/// Dual-path gap and the frozen ensemble's largest prediction change.
fn ensemble_check(rng: &mut ChaCha8Rng, members: usize, d: usize, process: &TargetProcess, horizon: f64) -> Result<(f64, f64)> {
    let ws: Vec<Vec<f64>> = (0..members).map(|_| random_vec(rng, d, 1.0)).collect();
    let (_, weights) = random_points(rng, members - 1);
    let opts = FlowOptions { horizon, dt: 0.05, ..FlowOptions::default() };
    let live = ensemble_flow(&ws, &weights, process, &opts, false)?;
    let frozen = ensemble_flow(&ws, &weights, process, &opts, true)?;
    let change = frozen.predictions.iter().map(|q| (q - frozen.predictions[0]).abs()).fold(0.0, f64::max);
    Ok((live.max_gap, change))
}

fn ensemble_collapse(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let p = &cfg.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SeedOutcome::default();
    let d = p.lin_dim;
    let (points, prob) = random_points(&mut rng, d);
    let n = points.len();
    let before = random_vec(&mut rng, n, 2.0);
    let after = random_vec(&mut rng, n, 2.0);
    let amplitude = random_vec(&mut rng, n, 1.0);
    let reward = random_vec(&mut rng, n, 1.0);
    let next: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    let schedules = [
        ("step", TargetSchedule::Step { before: before.clone(), after, at: 0.5 * p.lin_horizon }),
        ("sinusoid", TargetSchedule::Sinusoid { base: before, amplitude, period: 2.0 }),
        ("td_drift", TargetSchedule::TdDrift { reward, gamma: 0.5, next, refresh: 0.25 }),
    ];
    for (label, schedule) in schedules {
        let process = TargetProcess::new(points.clone(), prob.clone(), schedule)?;
        let (gap, change) = ensemble_check(&mut rng, p.ensemble_members, d, &process, p.lin_horizon)?;
        out.put(format!("{label}.max_gap"), gap);
        out.put(format!("{label}.frozen_change"), change);
        if label == "step" {
            // identical members collapse to the single-member flow
            let w = random_vec(&mut rng, d, 1.0);
            let opts = FlowOptions { horizon: p.lin_horizon, dt: 0.05, ..FlowOptions::default() };
            let copies = vec![w.clone(); p.ensemble_members];
            let uniform = vec![1.0 / p.ensemble_members as f64; p.ensemble_members];
            let ens = ensemble_flow(&copies, &uniform, &process, &opts, false)?;
            // one accepted halving lands the single flow on the ensemble's grid
            let fixed = FlowOptions { dt: 2.0 * ens.dt, max_halvings: 0, tol: f64::INFINITY, ..opts };
            let single = mono_flow(&w, &process, &fixed, false)?;
            ensure(single.times == ens.times, || "single-member grid differs from the ensemble grid".into())?;
            let gap = ens.predictions.iter().zip(&single.predictions).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            out.put("identical.max_gap", gap);
            let mut csv = String::from("m,member_average,direct\n");
            for ((m, a), b) in ens.times.iter().zip(&ens.member_average).zip(&ens.direct) {
                writeln!(csv, "{m},{},{}", dot(a, &process.points[0]), dot(b, &process.points[0])).unwrap();
            }
            out.artifacts.push(Artifact::new(format!("seed{seed}/identical_members.csv"), csv.into_bytes()));
        }
    }
    Ok(out)
}

fn utd_sweep(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let p = &cfg.params;
    let setup = ChainSetup::new(&cfg.env)?;
    let offline = collect_dataset(&setup.mdp, &Policy::uniform(&setup.mdp), p.offline_size, cfg.env.dataset_seed)?;
    let sched = schedule(&cfg.schedule);
    let spec_eval = setup.eval_spec(cfg, seed);
    let mut out = SeedOutcome::default();
    for spec in &cfg.critics {
        let critic = Critic::build(spec, &setup);
        let model = critic.model();
        let name = spec.name();
        let mut curves = Vec::new();
        for &utd in &p.utd {
            let curve = utd_loop(
                model,
                &setup.mdp,
                offline.clone(),
                setup.gamma,
                utd,
                p.env_steps,
                p.epsilon,
                &sched,
                &spec_eval,
                p.curve_every,
                seed,
            )?;
            let last = *curve.last().unwrap();
            out.put(format!("{name}.u{utd}.final_success"), last.success_rate);
            out.put(format!("{name}.u{utd}.final_return"), last.mean_return);
            let mut csv = String::from("env_step,updates,success_rate,mean_return\n");
            for pt in &curve {
                writeln!(csv, "{},{},{},{}", pt.env_step, pt.updates, pt.success_rate, pt.mean_return).unwrap();
            }
            out.artifacts.push(Artifact::new(format!("seed{seed}/{name}_utd{utd}.csv"), csv.into_bytes()));
            curves.push((utd, curve));
        }
        let best = curves.iter().map(|(_, c)| c.last().unwrap().success_rate).fold(0.0, f64::max);
        for (utd, curve) in &curves {
            out.put(format!("{name}.u{utd}.steps_to_75"), steps_to_fraction(curve, best, 0.75, p.env_steps) as f64);
        }
    }
    Ok(out)
}

fn mean(aggs: &BTreeMap<String, Aggregate>, key: &str) -> Option<f64> {
    aggs.get(key).map(|a| a.mean)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("missing".into(), |v| format!("{v:.6}"))
}

/// Rows' values for one metric across all seeds that completed.
fn column<'a>(rows: &'a [SeedRow], key: &'a str) -> impl Iterator<Item = f64> + 'a {
    rows.iter().filter_map(move |r| r.metrics.get(key).copied())
}

fn all_rows(rows: &[SeedRow], key: &str, pred: impl Fn(f64) -> bool) -> bool {
    let vals: Vec<f64> = column(rows, key).collect();
    !vals.is_empty() && vals.len() == rows.len() && vals.into_iter().all(pred)
}

fn max_of(rows: &[SeedRow], key: &str) -> f64 {
    column(rows, key).fold(f64::NEG_INFINITY, f64::max)
}

/// Acceptance checks and summary tables computed from all seeds.
pub(crate) fn finish(
    cfg: &ExperimentConfig,
    rows: &[SeedRow],
    aggs: &BTreeMap<String, Aggregate>,
) -> (Vec<Check>, Vec<Artifact>) {
    let mut checks = Vec::new();
    let mut artifacts = Vec::new();
    let names: Vec<String> = cfg.critics.iter().map(|c| c.name()).collect();
    let p = &cfg.params;
    match cfg.experiment {
        ExperimentId::TdOracle => {
            for n in &names {
                let hits = column(rows, &format!("{n}.converged")).filter(|v| *v == 1.0).count();
                let need = (p.min_converged_fraction * cfg.seeds.len() as f64).ceil() as usize;
                checks.push(Check::gate(
                    format!("{n} reaches error < {} on >= {need}/{} seeds", p.oracle_threshold, cfg.seeds.len()),
                    hits >= need,
                    format!("{hits}/{} seeds; final error {}", cfg.seeds.len(), fmt_opt(mean(aggs, &format!("{n}.final_error")))),
                ));
            }
        }
        ExperimentId::DistVsExpected => {
            let same = rows.iter().filter(|r| r.error.is_none()).all(|r| {
                let hs: Vec<&String> = r.hashes.values().collect();
                hs.windows(2).all(|w| w[0] == w[1])
            });
            checks.push(Check::gate("variants share the data pipeline", same, "dataset hashes per seed"));
            let find = |loss: FlowLoss| cfg.critics.iter().find(|c| c.loss == loss).map(|c| c.name());
            if let (Some(e), Some(d)) = (find(FlowLoss::Expected), find(FlowLoss::Distributional)) {
                let (ve, vd) = (mean(aggs, &format!("{e}.var_z")), mean(aggs, &format!("{d}.var_z")));
                if cfg.env.bernoulli_reward.is_some() {
                    checks.push(Check::gate(
                        "Var_z(Q) distributional > expected",
                        matches!((ve, vd), (Some(a), Some(b)) if b > a),
                        format!("expected {}, distributional {}", fmt_opt(ve), fmt_opt(vd)),
                    ));
                } else {
                    for n in [&e, &d] {
                        let err = mean(aggs, &format!("{n}.mean_q_error"));
                        checks.push(Check::gate(
                            format!("{n} mean Q within 0.05 of oracle"),
                            err.is_some_and(|v| v < 0.05),
                            format!("mean |Q - Q*| {}", fmt_opt(err)),
                        ));
                    }
                }
            }
            let mut csv = String::from("variant,success_mean,success_std,mean_q_mean,mean_q_std,var_z_mean,var_z_std\n");
            for n in &names {
                let g = |m: &str| aggs.get(&format!("{n}.{m}")).copied().unwrap_or(Aggregate::of(&[]));
                let (s, q, v) = (g("success"), g("mean_q"), g("var_z"));
                writeln!(csv, "{n},{},{},{},{},{},{}", s.mean, s.std, q.mean, q.std, v.mean, v.std).unwrap();
            }
            artifacts.push(Artifact::new("table.csv", csv.into_bytes()));
        }
        ExperimentId::Staleness => {
            for n in &names {
                if p.staleness_pct.contains(&0) {
                    let ok = all_rows(rows, &format!("{n}.k0_matches_current"), |v| v == 1.0);
                    checks.push(Check::gate(format!("{n}: kappa 0 equals current-only evaluation"), ok, ""));
                }
                if p.staleness_pct.contains(&100) {
                    let ok = all_rows(rows, &format!("{n}.k100_matches_stale"), |v| v == 1.0);
                    checks.push(Check::gate(format!("{n}: kappa 100 equals stale-only evaluation"), ok, ""));
                }
            }
            let mut csv = String::from("critic");
            for k in &p.staleness_pct {
                write!(csv, ",k{k}").unwrap();
            }
            csv.push('\n');
            for n in &names {
                csv.push_str(n);
                for k in &p.staleness_pct {
                    write!(csv, ",{}", mean(aggs, &format!("{n}.success_k{k}")).unwrap_or(f64::NAN)).unwrap();
                }
                csv.push('\n');
            }
            artifacts.push(Artifact::new("staleness_table.csv", csv.into_bytes()));
        }
        ExperimentId::TargetNoise => {
            let (f, m) = (mean(aggs, "flow.degradation"), mean(aggs, "mono.degradation"));
            let std = |k: &str| aggs.get(k).map_or(0.0, |a| a.std);
            checks.push(Check::gate(
                "flow degradation at largest kappa <= mono degradation",
                matches!((f, m), (Some(a), Some(b)) if a <= b),
                format!(
                    "flow {} +- {:.6}, mono {} +- {:.6}",
                    fmt_opt(f),
                    std("flow.degradation"),
                    fmt_opt(m),
                    std("mono.degradation")
                ),
            ));
            let mut csv = String::from("critic,kappa,error_mean,error_std\n");
            for n in &names {
                for k in &p.kappas {
                    let a = aggs.get(&format!("{n}.error_{}", kappa_label(*k))).copied().unwrap_or(Aggregate::of(&[]));
                    writeln!(csv, "{n},{k},{},{}", a.mean, a.std).unwrap();
                }
            }
            artifacts.push(Artifact::new("noise_table.csv", csv.into_bytes()));
        }
        ExperimentId::Freeze => {
            let (f, m) = (mean(aggs, "flow.post_freeze_error"), mean(aggs, "mono.post_freeze_error"));
            let std = |k: &str| aggs.get(k).map_or(0.0, |a| a.std);
            checks.push(Check::gate(
                "mono post-freeze error > flow post-freeze error",
                matches!((f, m), (Some(a), Some(b)) if b > a),
                format!(
                    "flow {} +- {:.6}, mono {} +- {:.6}",
                    fmt_opt(f),
                    std("flow.post_freeze_error"),
                    fmt_opt(m),
                    std("mono.post_freeze_error")
                ),
            ));
        }
        ExperimentId::FeatureNorms => {
            for n in &names {
                for kind in [TargetKind::TdGreedy, TargetKind::MonteCarlo] {
                    let key = format!("{n}.{kind}.replay_diff");
                    checks.push(Check::gate(
                        format!("{n} {kind}: replayed norms match live logging"),
                        all_rows(rows, &key, |v| v <= 1e-12),
                        format!("max diff {:e}", max_of(rows, &key)),
                    ));
                }
            }
        }
        ExperimentId::TtrScaling => {
            for &c in &p.ttr_c {
                let key = format!("c{c}.exponent");
                let (lo, hi) = if c == 1.0 { (0.9, f64::INFINITY) } else { (c - 0.1, c + 0.1) };
                checks.push(Check::gate(
                    format!("c = {c} field exponent in [{lo}, {hi}]"),
                    all_rows(rows, &key, |v| v >= lo && v <= hi),
                    format!("mean {}", fmt_opt(mean(aggs, &key))),
                ));
            }
            checks.push(Check::gate(
                "constant field exponent in [-0.1, 0.1]",
                all_rows(rows, "constant.exponent", |v| v.abs() <= 0.1),
                format!("mean {}", fmt_opt(mean(aggs, "constant.exponent"))),
            ));
        }
        ExperimentId::ConicAudit => {
            for (key, want) in [
                ("exact.c0.5.fraction", 0.0),
                ("exact.c0.9.fraction", 0.0),
                ("constant.c0.5.fraction", 1.0),
                ("half.c0.4.fraction", 0.0),
                ("half.c0.6.fraction", 1.0),
            ] {
                checks.push(Check::gate(format!("{key} = {want}"), all_rows(rows, key, |v| v == want), fmt_opt(mean(aggs, key))));
            }
            checks.push(Check::gate(
                "half field satisfies the boundary condition",
                all_rows(rows, "half.boundary_ok", |v| v == 1.0),
                "",
            ));
            checks.push(Check::gate(
                "no perturbed trajectory leaves the region",
                all_rows(rows, "half.containment_exits", |v| v == 0.0),
                format!("{} trials per seed at half of delta_g", p.containment_trials),
            ));
            checks.push(Check::info("violation fraction monotone in c", all_rows(rows, "half.monotone_in_c", |v| v == 1.0), ""));
            checks.push(Check::info(
                "empirical 5%-inflated output band satisfies the boundary condition",
                all_rows(rows, "half.empirical_region_boundary_ok", |v| v == 1.0),
                "the band is narrower than the boundary condition needs for a c = 0.5 field",
            ));
        }
        ExperimentId::PredictTargetAblation | ExperimentId::SingleStepAblation => {
            let baseline = mean(aggs, "flow.final_error");
            for n in names.iter().filter(|n| n.as_str() != "flow") {
                let other = mean(aggs, &format!("{n}.final_error"));
                checks.push(Check::info(
                    format!("{n} final error >= flow"),
                    matches!((baseline, other), (Some(a), Some(b)) if b >= a),
                    format!("flow {}, {n} {}", fmt_opt(baseline), fmt_opt(other)),
                ));
            }
        }
        ExperimentId::LinearTheory => {
            for (key, tol) in [
                ("closed_form.max_rel_error", 1e-12),
                ("gain.max_rel_error", 1e-12),
                ("beta_dot.max_fd_error", 1e-6),
                ("decomposition.max_fd_error", 1e-6),
                ("beta_dot.last_slice_max", 0.0),
                ("frozen_features.feature_learning_total", 0.0),
                ("frozen_features.mono_change", 0.0),
                ("ensemble.max_gap", 1e-8),
                ("ensemble.frozen_change", 0.0),
            ] {
                checks.push(Check::gate(
                    format!("{key} <= {tol:e}"),
                    all_rows(rows, key, |v| v <= tol),
                    format!("max {:e}", max_of(rows, key)),
                ));
            }
            checks.push(Check::gate(
                "frozen_features.flow_change > 0.1",
                all_rows(rows, "frozen_features.flow_change", |v| v > 0.1),
                fmt_opt(mean(aggs, "frozen_features.flow_change")),
            ));
            checks.push(Check::gate(
                "frozen_features.reweighting_share = 1",
                all_rows(rows, "frozen_features.reweighting_share", |v| v == 1.0),
                "",
            ));
        }
        ExperimentId::EnsembleCollapse => {
            for label in ["step", "sinusoid", "td_drift"] {
                let gap = format!("{label}.max_gap");
                let frozen = format!("{label}.frozen_change");
                checks.push(Check::gate(
                    format!("{gap} <= 1e-8"),
                    all_rows(rows, &gap, |v| v <= 1e-8),
                    format!("max {:e}", max_of(rows, &gap)),
                ));
                checks.push(Check::gate(format!("{frozen} = 0"), all_rows(rows, &frozen, |v| v == 0.0), ""));
            }
            checks.push(Check::gate(
                "identical members match the single flow",
                all_rows(rows, "identical.max_gap", |v| v <= 1e-10),
                "",
            ));
        }
        ExperimentId::UtdSweep => {
            let largest = p.utd.iter().max().copied().unwrap_or(1);
            let (f, m) =
                (mean(aggs, &format!("flow.u{largest}.steps_to_75")), mean(aggs, &format!("mono.u{largest}.steps_to_75")));
            checks.push(Check::info(
                format!("flow reaches 75% of best no later than mono at UTD {largest}"),
                matches!((f, m), (Some(a), Some(b)) if a <= b),
                format!("flow {}, mono {}; reference grid {:?}", fmt_opt(f), fmt_opt(m), p.reference_utd),
            ));
        }
    }
    (checks, artifacts)
}
