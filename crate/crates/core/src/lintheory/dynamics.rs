use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::{beta_coefficients, mean_predictor, LinearFlowModel};
use super::process::{gain_rhs, slice_flow_rhs, slice_moments, Moments, TargetProcess};
use crate::error::{ensure, Error, Result};

/// Gains beyond this magnitude count as a blow-up.
pub const GAIN_CAP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    pub horizon: f64,
    /// Initial step; halved until halving moves the endpoint by less than `tol`.
    pub dt: f64,
    pub tol: f64,
    pub max_halvings: usize,
    /// Support point whose prediction and target are recorded.
    pub probe: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { horizon: 5.0, dt: 0.01, tol: 1e-6, max_halvings: 12, probe: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FlowStatus {
    Completed,
    BlewUp { m: f64, reason: String },
}

struct Path {
    dt: f64,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    /// Targets in effect at each recorded time.
    targets: Vec<Vec<f64>>,
    status: FlowStatus,
}

/// Grid points `k dt` merged with the breakpoints; the flag marks breakpoints.
fn time_grid(horizon: f64, dt: f64, breakpoints: &[f64]) -> Vec<(f64, bool)> {
    let n = (horizon / dt).ceil() as usize;
    let mut ts: Vec<(f64, bool)> = (0..=n).map(|k| ((k as f64 * dt).min(horizon), false)).collect();
    ts.extend(breakpoints.iter().map(|b| (*b, true)));
    ts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let close = 1e-12 * horizon.max(1.0);
    let mut out: Vec<(f64, bool)> = Vec::with_capacity(ts.len());
    for (t, brk) in ts {
        match out.last_mut() {
            Some(last) if (t - last.0).abs() <= close => {
                if brk {
                    *last = (t, true);
                }
            }
            _ => out.push((t, brk)),
        }
    }
    out
}

/// `(state, m, piece_start) -> per-point targets`.
type TargetFn<'a> = dyn Fn(&[f64], f64, f64) -> Vec<f64> + 'a;
/// `(state, targets) -> state derivative`.
type FieldFn<'a> = dyn Fn(&[f64], &[f64]) -> Vec<f64> + 'a;

/// Classical RK4 over a fixed grid. `targets(state, m, piece_start)` supplies the
/// per-point targets. Bootstrapped targets are snapshotted at `m = 0` and at every
/// breakpoint, then held.
fn rk4_run(
    y0: &[f64],
    opts: &FlowOptions,
    dt: f64,
    process: &TargetProcess,
    targets: &TargetFn<'_>,
    field: &FieldFn<'_>,
    guard: &dyn Fn(&[f64]) -> Option<String>,
) -> Path {
    let grid = time_grid(opts.horizon, dt, &process.breakpoints(opts.horizon));
    let boot = process.is_bootstrapped();
    let mut y = y0.to_vec();
    let mut held = boot.then(|| targets(&y, 0.0, 0.0));
    let mut piece = 0.0;
    let current = |y: &[f64], m: f64, piece: f64, held: &Option<Vec<f64>>| held.clone().unwrap_or_else(|| targets(y, m, piece));
    let mut path = Path {
        dt,
        times: vec![grid[0].0],
        states: vec![y.clone()],
        targets: vec![current(&y, 0.0, 0.0, &held)],
        status: FlowStatus::Completed,
    };
    let axpy = |y: &[f64], k: &[f64], s: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    for w in grid.windows(2) {
        let (m, h) = (w[0].0, w[1].0 - w[0].0);
        let f = |state: &[f64], at: f64| field(state, &current(state, at, piece, &held));
        let k1 = f(&y, m);
        let k2 = f(&axpy(&y, &k1, 0.5 * h), m + 0.5 * h);
        let k3 = f(&axpy(&y, &k2, 0.5 * h), m + 0.5 * h);
        let k4 = f(&axpy(&y, &k3, h), m + h);
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let (t, brk) = w[1];
        if brk {
            piece = t;
            if boot {
                held = Some(targets(&y, t, t));
            }
        }
        path.times.push(t);
        path.targets.push(current(&y, t, piece, &held));
        path.states.push(y.clone());
        if let Some(reason) = guard(&y) {
            path.status = FlowStatus::BlewUp { m: t, reason };
            return path;
        }
    }
    path
}

/// Runs at `dt` and `dt / 2`, halving until the endpoints agree within `tol`.
fn converged_run(
    y0: &[f64],
    opts: &FlowOptions,
    process: &TargetProcess,
    targets: &TargetFn<'_>,
    field: &FieldFn<'_>,
    guard: &dyn Fn(&[f64]) -> Option<String>,
) -> Result<Path> {
    ensure(opts.horizon > 0.0 && opts.dt > 0.0 && opts.dt <= opts.horizon, || "need 0 < dt <= horizon".into())?;
    ensure(opts.probe < process.points.len(), || "probe index out of range".into())?;
    let mut dt = opts.dt;
    let mut coarse = rk4_run(y0, opts, dt, process, targets, field, guard);
    for _ in 0..=opts.max_halvings {
        let fine = rk4_run(y0, opts, dt / 2.0, process, targets, field, guard);
        if coarse.status != FlowStatus::Completed || fine.status != FlowStatus::Completed {
            return Ok(fine);
        }
        let a = coarse.states.last().unwrap();
        let b = fine.states.last().unwrap();
        let gap = a.iter().zip(b).fold(0.0f64, |g, (x, y)| g.max((x - y).abs()));
        if gap < opts.tol {
            return Ok(fine);
        }
        dt /= 2.0;
        coarse = fine;
    }
    Err(Error::NoConvergence { iterations: opts.max_halvings, residual: dt })
}

/// `w_eff` and its feature-learning / reweighting split at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub m: f64,
    pub w_eff: Vec<f64>,
    pub w_eff_dot: Vec<f64>,
    /// `sum_i beta_i u_dot_i`.
    pub feature_learning: Vec<f64>,
    /// `sum_{i < T-2} beta_dot_i u_i` (0-based; the last slice's beta is constant).
    pub reweighting: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta_dot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub models: Vec<LinearFlowModel>,
    pub records: Vec<DecompositionRecord>,
    /// `f_FM(x_probe)`.
    pub predictions: Vec<f64>,
    /// `y_probe(m)`.
    pub targets: Vec<f64>,
    pub status: FlowStatus,
}

/// Slice-flow derivatives `[u_dot_0, v_dot_0, ...]` with frozen channels zeroed.
pub fn flow_derivative(model: &LinearFlowModel, moments: &Moments, freeze_u: bool, freeze_v: bool) -> Vec<f64> {
    let d = model.dim();
    let mut out = Vec::with_capacity(model.n_slices() * (d + 1));
    for j in 0..model.n_slices() {
        let (a, b) = slice_moments(model, j, moments);
        let w: Vec<f64> = model.u[j].iter().copied().chain([model.v[j]]).collect();
        let mut r = slice_flow_rhs(&w, &a, &b).expect("slice shapes are consistent");
        debug_assert!((r[d] - gain_rhs(model, j, moments)).abs() <= 1e-9 * (1.0 + r[d].abs()));
        if freeze_u {
            r[..d].fill(0.0);
        }
        if freeze_v {
            r[d] = 0.0;
        }
        out.extend(r);
    }
    out
}

/// Decomposition of `w_eff_dot` given the slice derivatives.
pub fn decompose(model: &LinearFlowModel, derivative: &[f64], m: f64) -> DecompositionRecord {
    let d = model.dim();
    let n = model.n_slices();
    let h = model.h();
    let beta = beta_coefficients(model);
    let u_dot: Vec<&[f64]> = derivative.chunks_exact(d + 1).map(|c| &c[..d]).collect();
    let v_dot: Vec<f64> = derivative.chunks_exact(d + 1).map(|c| c[d]).collect();
    let mut beta_dot = vec![0.0; n];
    let mut tail = 0.0;
    for i in (0..n).rev() {
        beta_dot[i] = beta[i] * tail;
        tail += h * v_dot[i] / (1.0 + h * model.v[i]);
    }
    let mut feature_learning = vec![0.0; d];
    let mut reweighting = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            feature_learning[k] += beta[i] * u_dot[i][k];
            if i + 1 < n {
                reweighting[k] += beta_dot[i] * model.u[i][k];
            }
        }
    }
    let w_eff_dot = feature_learning.iter().zip(&reweighting).map(|(a, b)| a + b).collect();
    DecompositionRecord { m, w_eff: model.effective_weight(), w_eff_dot, feature_learning, reweighting, beta, beta_dot }
}

/// RK4 integration of every slice's gradient flow with optional channel freezing.
pub fn integrate_flow(
    model0: &LinearFlowModel,
    process: &TargetProcess,
    opts: &FlowOptions,
    freeze_u: bool,
    freeze_v: bool,
) -> Result<FlowTrajectory> {
    if process.dim() != model0.dim() {
        return Err(Error::ShapeMismatch { expected: model0.dim(), got: process.dim() });
    }
    let with_state = |state: &[f64]| {
        let mut m = model0.clone();
        m.set_state(state);
        m
    };
    let targets = |state: &[f64], m: f64, piece: f64| {
        let model = with_state(state);
        process.targets(m, piece, &|x| mean_predictor(&model, x))
    };
    let field = |state: &[f64], tg: &[f64]| flow_derivative(&with_state(state), &process.moments(tg), freeze_u, freeze_v);
    let d = model0.dim();
    let guard = |state: &[f64]| {
        state
            .chunks_exact(d + 1)
            .map(|c| c[d])
            .find(|v| v.is_nan() || v.abs() > GAIN_CAP)
            .map(|v| format!("gain {v} beyond cap {GAIN_CAP}"))
    };
    let path = converged_run(&model0.to_state(), opts, process, &targets, &field, &guard)?;
    let x_probe = &process.points[opts.probe];
    let mut out = FlowTrajectory {
        dt: path.dt,
        times: path.times.clone(),
        models: Vec::with_capacity(path.times.len()),
        records: Vec::with_capacity(path.times.len()),
        predictions: Vec::with_capacity(path.times.len()),
        targets: Vec::with_capacity(path.times.len()),
        status: path.status,
    };
    for ((m, state), tg) in path.times.iter().zip(&path.states).zip(&path.targets) {
        let model = with_state(state);
        let deriv = flow_derivative(&model, &process.moments(tg), freeze_u, freeze_v);
        out.records.push(decompose(&model, &deriv, *m));
        out.predictions.push(mean_predictor(&model, x_probe));
        out.targets.push(tg[opts.probe]);
        out.models.push(model);
    }
    Ok(out)
}

impl FlowTrajectory {
    /// CSV: `m, u_<slice>_<k>..., v_<slice>..., beta_<slice>..., feature_learning_norm,
    /// reweighting_norm, f_probe, y_probe`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let Some(first) = self.models.first() else { return Ok(()) };
        let (n, d) = (first.n_slices(), first.dim());
        write!(w, "m")?;
        for j in 0..n {
            for k in 0..d {
                write!(w, ",u_{j}_{k}")?;
            }
        }
        for j in 0..n {
            write!(w, ",v_{j}")?;
        }
        for j in 0..n {
            write!(w, ",beta_{j}")?;
        }
        writeln!(w, ",feature_learning_norm,reweighting_norm,f_probe,y_probe")?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..self.times.len() {
            let (model, rec) = (&self.models[i], &self.records[i]);
            write!(w, "{}", self.times[i])?;
            for u in &model.u {
                for x in u {
                    write!(w, ",{x}")?;
                }
            }
            for v in &model.v {
                write!(w, ",{v}")?;
            }
            for b in &rec.beta {
                write!(w, ",{b}")?;
            }
            writeln!(
                w,
                ",{},{},{},{}",
                norm(&rec.feature_learning),
                norm(&rec.reweighting),
                self.predictions[i],
                self.targets[i]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonoTrajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub status: FlowStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-2 (Sigma w - b)`.
pub fn mono_derivative(w: &[f64], moments: &Moments) -> Vec<f64> {
    let d = w.len();
    (0..d).map(|i| -2.0 * (dot(&moments.sigma[i * d..(i + 1) * d], w) - moments.b[i])).collect()
}

/// Monolithic linear predictor `w^T x` under gradient flow; constant when `freeze` is set.
pub fn mono_flow(w0: &[f64], process: &TargetProcess, opts: &FlowOptions, freeze: bool) -> Result<MonoTrajectory> {
    if process.dim() != w0.len() {
        return Err(Error::ShapeMismatch { expected: w0.len(), got: process.dim() });
    }
    let targets = |w: &[f64], m: f64, piece: f64| process.targets(m, piece, &|x| dot(w, x));
    let field = |w: &[f64], tg: &[f64]| if freeze { vec![0.0; w.len()] } else { mono_derivative(w, &process.moments(tg)) };
    let path = converged_run(w0, opts, process, &targets, &field, &|_| None)?;
    let x = &process.points[opts.probe];
    let predictions = path.states.iter().map(|w| dot(w, x)).collect();
    let tg = path.targets.iter().map(|t| t[opts.probe]).collect();
    Ok(MonoTrajectory { dt: path.dt, times: path.times, weights: path.states, predictions, targets: tg, status: path.status })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleTrajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    /// `sum_p pi_p w_p(m)` from integrating every member.
    pub member_average: Vec<Vec<f64>>,
    /// `w_bar(m)` integrated directly from `w_bar(0)`.
    pub direct: Vec<Vec<f64>>,
    /// Ensemble predictor at the probe point.
    pub predictions: Vec<f64>,
    /// Largest coordinate gap between the two paths.
    pub max_gap: f64,
}

/// Integrates every member and the averaged weight side by side. Bootstrapped
/// targets use the ensemble predictor so both paths see the same targets.
pub fn ensemble_flow(
    members: &[Vec<f64>],
    weights: &[f64],
    process: &TargetProcess,
    opts: &FlowOptions,
    freeze: bool,
) -> Result<EnsembleTrajectory> {
    ensure(!members.is_empty(), || "ensemble needs members".into())?;
    if members.len() != weights.len() {
        return Err(Error::ShapeMismatch { expected: members.len(), got: weights.len() });
    }
    ensure((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12, || "mixture weights must sum to 1".into())?;
    let d = process.dim();
    if let Some(bad) = members.iter().find(|w| w.len() != d) {
        return Err(Error::ShapeMismatch { expected: d, got: bad.len() });
    }
    let average = |stacked: &[f64]| -> Vec<f64> {
        let mut avg = vec![0.0; d];
        for (w, p) in stacked.chunks_exact(d).zip(weights) {
            for (a, x) in avg.iter_mut().zip(w) {
                *a += p * x;
            }
        }
        avg
    };
    let stacked: Vec<f64> = members.concat();
    let targets = |s: &[f64], m: f64, piece: f64| {
        let avg = average(s);
        process.targets(m, piece, &|x| dot(&avg, x))
    };
    let field = |s: &[f64], tg: &[f64]| {
        if freeze {
            return vec![0.0; s.len()];
        }
        let mo = process.moments(tg);
        s.chunks_exact(d).flat_map(|w| mono_derivative(w, &mo)).collect()
    };
    let ens = converged_run(&stacked, opts, process, &targets, &field, &|_| None)?;
    // direct path on the exact grid the ensemble run settled on
    let fixed = FlowOptions { dt: ens.dt, max_halvings: 0, tol: f64::INFINITY, ..opts.clone() };
    let direct = rk4_run(
        &average(&stacked),
        &fixed,
        ens.dt,
        process,
        &|w, m, piece| process.targets(m, piece, &|x| dot(w, x)),
        &|w, tg| if freeze { vec![0.0; w.len()] } else { mono_derivative(w, &process.moments(tg)) },
        &|_| None,
    );
    let member_average: Vec<Vec<f64>> = ens.states.iter().map(|s| average(s)).collect();
    let max_gap = member_average
        .iter()
        .zip(&direct.states)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    let x = &process.points[opts.probe];
    let predictions = member_average.iter().map(|w| dot(w, x)).collect();
    Ok(EnsembleTrajectory { dt: ens.dt, times: ens.times, member_average, direct: direct.states, predictions, max_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lintheory::{slice_loss, TargetSchedule};

    fn two_point(schedule: TargetSchedule) -> TargetProcess {
        TargetProcess::new(vec![vec![1.0, 0.0], vec![0.3, 1.0]], vec![0.5, 0.5], schedule).unwrap()
    }

    fn step_process() -> TargetProcess {
        two_point(TargetSchedule::Step { before: vec![1.0, 0.5], after: vec![2.0, 1.0], at: 1.0 })
    }

    fn opts(horizon: f64) -> FlowOptions {
        FlowOptions { horizon, dt: 0.05, ..FlowOptions::default() }
    }

    #[test]
    fn frozen_features_still_move_predictor() {
        let model = LinearFlowModel::new(8, vec![vec![1.0, 0.5]; 7], vec![0.0; 7], 1.0).unwrap();
        let tr = integrate_flow(&model, &step_process(), &opts(6.0), true, false).unwrap();
        assert_eq!(tr.status, FlowStatus::Completed);
        let at = tr.times.iter().position(|t| *t == 1.0).unwrap();
        let change = (tr.predictions.last().unwrap() - tr.predictions[at]).abs();
        assert!(change > 0.1, "flow change {change}");
        for rec in &tr.records {
            assert!(rec.feature_learning.iter().all(|x| *x == 0.0));
            assert_eq!(rec.w_eff_dot, rec.reweighting);
            assert_eq!(*rec.beta_dot.last().unwrap(), 0.0);
        }
        assert!(tr.models.iter().all(|m| m.u == model.u));
        let mono = mono_flow(&[0.2, -0.1], &step_process(), &opts(6.0), true).unwrap();
        assert!(mono.predictions.iter().all(|p| *p == mono.predictions[0]));
    }

    #[test]
    fn fully_frozen_flow_is_constant() {
        let model = LinearFlowModel::random(4, 2, 0.5, 1.0, 5).unwrap();
        let tr = integrate_flow(&model, &step_process(), &opts(2.0), true, true).unwrap();
        assert!(tr.models.iter().all(|m| *m == model));
    }

    #[test]
    fn decomposition_sums_to_weight_derivative() {
        let model = LinearFlowModel::random(5, 2, 0.5, 1.0, 3).unwrap();
        let tr = integrate_flow(&model, &step_process(), &opts(3.0), false, false).unwrap();
        // central differences of w_eff along the trajectory
        for i in 1..tr.times.len() - 1 {
            let (a, b) = (&tr.records[i - 1], &tr.records[i + 1]);
            let span = tr.times[i + 1] - tr.times[i - 1];
            if (tr.times[i] - 1.0).abs() < 2.0 * tr.dt {
                continue;
            }
            for k in 0..2 {
                let fd = (b.w_eff[k] - a.w_eff[k]) / span;
                assert!((fd - tr.records[i].w_eff_dot[k]).abs() < 1e-3, "m = {}", tr.times[i]);
            }
        }
    }

    #[test]
    fn beta_dot_matches_finite_differences() {
        let model = LinearFlowModel::random(4, 2, 0.5, 1.0, 11).unwrap();
        let process = two_point(TargetSchedule::Constant(vec![1.5, -0.5]));
        let tr = integrate_flow(&model, &process, &opts(2.0), false, false).unwrap();
        let eps = 1e-6;
        for (model, rec) in tr.models.iter().zip(&tr.records).step_by(7) {
            let deriv = flow_derivative(model, &process.moments(&[1.5, -0.5]), false, false);
            let shift = |s: f64| {
                let mut m = model.clone();
                let st: Vec<f64> = model.to_state().iter().zip(&deriv).map(|(x, d)| x + s * d).collect();
                m.set_state(&st);
                beta_coefficients(&m)
            };
            let (p, q) = (shift(eps), shift(-eps));
            for i in 0..rec.beta.len() {
                let fd = (p[i] - q[i]) / (2.0 * eps);
                assert!((fd - rec.beta_dot[i]).abs() < 1e-6, "slice {i}: {fd} vs {}", rec.beta_dot[i]);
            }
        }
    }

    #[test]
    fn slice_losses_decrease_under_constant_target() {
        let model = LinearFlowModel::random(4, 2, 0.5, 0.5, 1).unwrap();
        let y = [1.0, 2.0];
        let process = two_point(TargetSchedule::Constant(y.to_vec()));
        let mo = process.moments(&y);
        let tr = integrate_flow(&model, &process, &opts(5.0), false, false).unwrap();
        let total = |m: &LinearFlowModel| -> f64 {
            (0..m.n_slices())
                .map(|j| {
                    let (a, b) = slice_moments(m, j, &mo);
                    let w: Vec<f64> = m.u[j].iter().copied().chain([m.v[j]]).collect();
                    slice_loss(&w, &a, &b, &mo, m.sigma_z2)
                })
                .sum()
        };
        let losses: Vec<f64> = tr.models.iter().map(total).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn ensemble_average_matches_direct_flow() {
        let members = vec![vec![0.3, -1.0], vec![-0.7, 0.4], vec![1.1, 0.2]];
        let weights = vec![0.2, 0.5, 0.3];
        for process in [
            step_process(),
            two_point(TargetSchedule::TdDrift { reward: vec![0.0, 1.0], gamma: 0.9, next: vec![1, 1], refresh: 0.25 }),
        ] {
            let tr = ensemble_flow(&members, &weights, &process, &opts(4.0), false).unwrap();
            assert!(tr.max_gap < 1e-8, "gap {}", tr.max_gap);
            let frozen = ensemble_flow(&members, &weights, &process, &opts(4.0), true).unwrap();
            assert!(frozen.predictions.iter().all(|p| *p == frozen.predictions[0]));
        }
    }

    #[test]
    fn mono_flow_solves_least_squares() {
        let process = two_point(TargetSchedule::Constant(vec![1.0, 2.0]));
        let tr = mono_flow(&[0.0, 0.0], &process, &opts(30.0), false).unwrap();
        let w = tr.weights.last().unwrap();
        // x0 = (1, 0), x1 = (0.3, 1): exact fit w = (1, 1.7)
        assert!((w[0] - 1.0).abs() < 1e-6 && (w[1] - 1.7).abs() < 1e-6);
    }

    #[test]
    fn blow_up_is_reported() {
        let mut model = LinearFlowModel::random(3, 1, 0.5, 1.0, 0).unwrap();
        model.v = vec![900.0, 900.0, 900.0];
        let process = TargetProcess::new(vec![vec![1.0]], vec![1.0], TargetSchedule::Constant(vec![1e6])).unwrap();
        let tr = integrate_flow(&model, &process, &opts(5.0), false, false).unwrap();
        assert!(matches!(tr.status, FlowStatus::BlewUp { .. }));
        assert!(tr.times.len() < 5.0f64.div_euclid(0.05) as usize);
    }

    #[test]
    fn step_schedule_splits_at_breakpoint() {
        let model = LinearFlowModel::random(3, 2, 0.3, 1.0, 2).unwrap();
        let o = FlowOptions { dt: 0.3, ..opts(2.0) };
        let tr = integrate_flow(&model, &step_process(), &o, false, false).unwrap();
        assert!(tr.times.iter().any(|t| (*t - 1.0).abs() < 1e-12));
        let i = tr.times.iter().position(|t| (*t - 1.0).abs() < 1e-12).unwrap();
        assert_eq!(tr.targets[i], 2.0);
        assert_eq!(tr.targets[i - 1], 1.0);
    }

    #[test]
    fn trajectory_csv_header() {
        let model = LinearFlowModel::random(3, 2, 0.3, 1.0, 2).unwrap();
        let tr = integrate_flow(&model, &step_process(), &opts(0.5), false, false).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "m,u_0_0,u_0_1,u_1_0,u_1_1,v_0,v_1,beta_0,beta_1,feature_learning_norm,reweighting_norm,f_probe,y_probe"
        );
        assert_eq!(text.lines().count(), tr.times.len() + 1);
    }
}
