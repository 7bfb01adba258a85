use serde::{Deserialize, Serialize};

use super::model::LinearFlowModel;
use crate::error::{ensure, Error, Result};

/// How the per-point targets evolve with the learning time `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetSchedule {
    Constant(Vec<f64>),
    /// `before` for `m < at`, `after` from `at` on.
    Step {
        before: Vec<f64>,
        after: Vec<f64>,
        at: f64,
    },
    /// `base + amplitude sin(2 pi m / period)`.
    Sinusoid {
        base: Vec<f64>,
        amplitude: Vec<f64>,
        period: f64,
    },
    /// Emulated bootstrapping: `y_p = reward_p + gamma f(x_{next_p})` where `f` is the
    /// model's mean predictor, snapshotted every `refresh` units of `m` and held in between.
    TdDrift {
        reward: Vec<f64>,
        gamma: f64,
        next: Vec<usize>,
        refresh: f64,
    },
}

/// Finite-support data process: inputs `x_p` with probabilities `prob_p` and targets `y_p(m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProcess {
    pub points: Vec<Vec<f64>>,
    pub prob: Vec<f64>,
    pub schedule: TargetSchedule,
}

/// `Sigma = E[x x^T]` (row-major), `b = E[x y]`, `q = E[y^2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub sigma: Vec<f64>,
    pub b: Vec<f64>,
    pub q: f64,
}

impl TargetProcess {
    pub fn new(points: Vec<Vec<f64>>, prob: Vec<f64>, schedule: TargetSchedule) -> Result<Self> {
        ensure(!points.is_empty(), || "process needs at least one point".into())?;
        if prob.len() != points.len() {
            return Err(Error::ShapeMismatch { expected: points.len(), got: prob.len() });
        }
        let d = points[0].len();
        ensure(d >= 1 && points.iter().all(|p| p.len() == d), || "points must share a nonzero dimension".into())?;
        ensure(prob.iter().all(|p| *p >= 0.0 && p.is_finite()), || "probabilities must be >= 0".into())?;
        ensure((prob.iter().sum::<f64>() - 1.0).abs() <= 1e-12, || "probabilities must sum to 1".into())?;
        let n = points.len();
        let len_ok = |v: &Vec<f64>| v.len() == n;
        match &schedule {
            TargetSchedule::Constant(y) => ensure(len_ok(y), || "one target per point".into())?,
            TargetSchedule::Step { before, after, at } => {
                ensure(len_ok(before) && len_ok(after), || "one target per point".into())?;
                ensure(at.is_finite(), || "step time must be finite".into())?;
            }
            TargetSchedule::Sinusoid { base, amplitude, period } => {
                ensure(len_ok(base) && len_ok(amplitude), || "one target per point".into())?;
                ensure(*period > 0.0, || "period must be positive".into())?;
            }
            TargetSchedule::TdDrift { reward, gamma, next, refresh } => {
                ensure(*refresh > 0.0, || "refresh period must be positive".into())?;
                ensure(len_ok(reward) && next.len() == n, || "one reward and successor per point".into())?;
                ensure(next.iter().all(|j| *j < n), || "successor index out of range".into())?;
                ensure((0.0..1.0).contains(gamma), || "gamma must be in [0, 1)".into())?;
            }
        }
        Ok(Self { points, prob, schedule })
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Times in `(0, horizon)` at which the targets jump or are refreshed.
    pub fn breakpoints(&self, horizon: f64) -> Vec<f64> {
        match &self.schedule {
            TargetSchedule::Step { at, .. } if *at > 0.0 && *at < horizon => vec![*at],
            TargetSchedule::TdDrift { refresh, .. } => (1..).map(|k| k as f64 * refresh).take_while(|t| *t < horizon).collect(),
            _ => Vec::new(),
        }
    }

    pub fn is_bootstrapped(&self) -> bool {
        matches!(self.schedule, TargetSchedule::TdDrift { .. })
    }

    /// Targets at time `m`. Step schedules are read at `piece_start`, the start of the
    /// integration segment containing `m`, so each segment sees one side of the jump.
    /// Bootstrapped schedules evaluate `predictor` on successor points.
    pub fn targets(&self, m: f64, piece_start: f64, predictor: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        match &self.schedule {
            TargetSchedule::Constant(y) => y.clone(),
            TargetSchedule::Step { before, after, at } => {
                if piece_start < *at {
                    before.clone()
                } else {
                    after.clone()
                }
            }
            TargetSchedule::Sinusoid { base, amplitude, period } => {
                let s = (std::f64::consts::TAU * m / period).sin();
                base.iter().zip(amplitude).map(|(b, a)| b + a * s).collect()
            }
            TargetSchedule::TdDrift { reward, gamma, next, .. } => {
                reward.iter().zip(next).map(|(r, j)| r + gamma * predictor(&self.points[*j])).collect()
            }
        }
    }

    pub fn moments(&self, targets: &[f64]) -> Moments {
        let d = self.dim();
        let mut sigma = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        let mut q = 0.0;
        for ((x, p), y) in self.points.iter().zip(&self.prob).zip(targets) {
            for i in 0..d {
                b[i] += p * x[i] * y;
                for j in 0..d {
                    sigma[i * d + j] += p * x[i] * x[j];
                }
            }
            q += p * y * y;
        }
        Moments { sigma, b, q }
    }
}

/// `(A_j, b_j)` for slice `j`: second moments of `[x; S_j]` with `S_j = alpha z + (1 - alpha) y`,
/// and its cross moment with `y - z`, using `E[z] = 0` and `z` independent of `(x, y)`.
/// `A_j` is row-major `(d + 1) x (d + 1)`.
pub fn slice_moments(model: &LinearFlowModel, slice: usize, m: &Moments) -> (Vec<f64>, Vec<f64>) {
    slice_moments_at(model.alpha(slice), model.sigma_z2, m)
}

fn slice_moments_at(a: f64, s2: f64, m: &Moments) -> (Vec<f64>, Vec<f64>) {
    let d = m.b.len();
    let n = d + 1;
    let mut big = vec![0.0; n * n];
    for i in 0..d {
        big[i * n..i * n + d].copy_from_slice(&m.sigma[i * d..(i + 1) * d]);
        big[i * n + d] = (1.0 - a) * m.b[i];
        big[d * n + i] = (1.0 - a) * m.b[i];
    }
    big[d * n + d] = (1.0 - a).powi(2) * m.q + a * a * s2;
    let mut rhs = m.b.clone();
    rhs.push((1.0 - a) * m.q - a * s2);
    (big, rhs)
}

/// `-2 (A w - b)`.
pub fn slice_flow_rhs(w: &[f64], a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = w.len();
    if a.len() != n * n || b.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: b.len() });
    }
    Ok((0..n)
        .map(|i| {
            let aw: f64 = a[i * n..(i + 1) * n].iter().zip(w).map(|(x, y)| x * y).sum();
            -2.0 * (aw - b[i])
        })
        .collect())
}

/// Slice loss `w^T A w - 2 b^T w + E[(y - z)^2]`; its negative gradient is [`slice_flow_rhs`].
pub fn slice_loss(w: &[f64], a: &[f64], b: &[f64], m: &Moments, sigma_z2: f64) -> f64 {
    let n = w.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += w[i] * a[i * n + j] * w[j];
        }
    }
    quad - 2.0 * b.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + m.q + sigma_z2
}

/// Closed-form gain dynamics for slice `k`.
pub fn gain_rhs(model: &LinearFlowModel, slice: usize, m: &Moments) -> f64 {
    gain_at(model.alpha(slice), &model.u[slice], model.v[slice], model.sigma_z2, m)
}

fn gain_at(a: f64, u: &[f64], v: f64, s2: f64, m: &Moments) -> f64 {
    let bu: f64 = m.b.iter().zip(u).map(|(x, y)| x * y).sum();
    -2.0 * ((1.0 - a) * bu + ((1.0 - a).powi(2) * m.q + a * a * s2) * v - (1.0 - a) * m.q + a * s2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn process() -> TargetProcess {
        TargetProcess::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, -1.0]],
            vec![0.5, 0.3, 0.2],
            TargetSchedule::Constant(vec![1.0, -0.5, 2.0]),
        )
        .unwrap()
    }

    fn moments(p: &TargetProcess) -> Moments {
        let y = p.targets(0.0, 0.0, &|_| 0.0);
        p.moments(&y)
    }

    #[test]
    fn alpha_extremes() {
        let model = LinearFlowModel::random(5, 2, 1.0, 0.7, 1).unwrap();
        let mo = moments(&process());
        let (a, b) = slice_moments(&model, 0, &mo);
        assert_eq!(model.alpha(0), 1.0);
        assert_eq!(a[8], 0.7);
        assert_eq!(b[2], -0.7);
        assert_eq!(a[2], 0.0);
        let (a, b) = slice_moments_at(0.0, 0.7, &mo);
        assert_eq!(b[2], mo.q);
        assert_eq!(a[8], mo.q);
        assert_eq!(a[2], mo.b[0]);
    }

    #[test]
    fn monte_carlo_moments() {
        let p = process();
        let model = LinearFlowModel::random(5, 2, 1.0, 0.7, 1).unwrap();
        let mo = moments(&p);
        let ys = [1.0, -0.5, 2.0];
        let slice = 2;
        let al = model.alpha(slice);
        let (a, b) = slice_moments(&model, slice, &mo);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let mut sa = [0.0; 9];
        let mut sa2 = [0.0; 9];
        let mut sb = [0.0; 3];
        let mut sb2 = [0.0; 3];
        let width = (3.0 * 0.7f64).sqrt();
        for _ in 0..n {
            let r: f64 = rng.gen();
            let i = if r < 0.5 {
                0
            } else if r < 0.8 {
                1
            } else {
                2
            };
            let z = rng.gen_range(-width..width);
            let xt = [p.points[i][0], p.points[i][1], al * z + (1.0 - al) * ys[i]];
            for r in 0..3 {
                for c in 0..3 {
                    let v = xt[r] * xt[c];
                    sa[r * 3 + c] += v;
                    sa2[r * 3 + c] += v * v;
                }
                let v = xt[r] * (ys[i] - z);
                sb[r] += v;
                sb2[r] += v * v;
            }
        }
        let nf = n as f64;
        let within = |sum: f64, sq: f64, exact: f64| {
            let mean = sum / nf;
            let se = ((sq / nf - mean * mean) / nf).sqrt();
            (mean - exact).abs() <= 3.0 * se + 1e-12
        };
        for k in 0..9 {
            assert!(within(sa[k], sa2[k], a[k]), "A[{k}]");
        }
        for k in 0..3 {
            assert!(within(sb[k], sb2[k], b[k]), "b[{k}]");
        }
    }

    #[test]
    fn rhs_stationary_and_by_hand() {
        // A = [[2, 1], [1, 3]], b = [1, 2] -> A^{-1} b = [0.2, 0.6]
        let a = [2.0, 1.0, 1.0, 3.0];
        let b = [1.0, 2.0];
        let r = slice_flow_rhs(&[0.2, 0.6], &a, &b).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15));
        let r = slice_flow_rhs(&[1.0, -1.0], &a, &b).unwrap();
        assert_eq!(r, vec![-2.0 * (1.0 - 1.0), -2.0 * (-2.0 - 2.0)]);
    }

    #[test]
    fn rhs_is_negative_loss_gradient() {
        let p = process();
        let mo = moments(&p);
        let model = LinearFlowModel::random(6, 2, 1.0, 0.4, 3).unwrap();
        for slice in 0..model.n_slices() {
            let (a, b) = slice_moments(&model, slice, &mo);
            let w: Vec<f64> = model.u[slice].iter().copied().chain([model.v[slice]]).collect();
            let rhs = slice_flow_rhs(&w, &a, &b).unwrap();
            for k in 0..w.len() {
                let h = 1e-5;
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp[k] += h;
                wm[k] -= h;
                let fd = (slice_loss(&wp, &a, &b, &mo, 0.4) - slice_loss(&wm, &a, &b, &mo, 0.4)) / (2.0 * h);
                assert!((rhs[k] + fd).abs() < 1e-8, "slice {slice} coord {k}");
            }
            assert!((gain_rhs(&model, slice, &mo) - rhs[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn gain_special_cases() {
        let mo = Moments { sigma: vec![1.0], b: vec![0.3], q: 2.0 };
        for v in [-1.0, 0.25, 3.0] {
            assert!((gain_at(1.0, &[0.4], v, 0.5, &mo) - (-2.0 * 0.5 * (v + 1.0))).abs() < 1e-15);
            assert!((gain_at(0.0, &[0.0], v, 0.5, &mo) - (-2.0 * 2.0 * (v - 1.0))).abs() < 1e-15);
        }
    }

    #[test]
    fn schedules() {
        let pts = vec![vec![1.0], vec![2.0]];
        let step = TargetProcess::new(
            pts.clone(),
            vec![0.5, 0.5],
            TargetSchedule::Step { before: vec![1.0, 1.0], after: vec![2.0, 2.0], at: 1.0 },
        )
        .unwrap();
        assert_eq!(step.targets(0.99, 0.9, &|_| 0.0), vec![1.0, 1.0]);
        assert_eq!(step.targets(1.0, 1.0, &|_| 0.0), vec![2.0, 2.0]);
        let td = TargetProcess::new(
            pts,
            vec![0.5, 0.5],
            TargetSchedule::TdDrift { reward: vec![1.0, 0.0], gamma: 0.5, next: vec![1, 1], refresh: 0.1 },
        )
        .unwrap();
        assert_eq!(td.targets(0.0, 0.0, &|x| 3.0 * x[0]), vec![4.0, 3.0]);
        assert!(TargetProcess::new(vec![vec![1.0]], vec![0.9], TargetSchedule::Constant(vec![1.0])).is_err());
    }
}
