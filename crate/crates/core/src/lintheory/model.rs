use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Linear flow model: `T - 1` Euler slices with velocity `v_i s + u_i^T x` and
/// step `h = 1 / (T - 1)`, started from noise `s_1 = z` with variance `sigma_z2`.
///
/// Slices are 0-based: slice `j` has interpolation weight
/// `alpha_j = (T - 1 - j) / (T - 1)`, so slice 0 sees pure noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFlowModel {
    pub t_steps: usize,
    pub u: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub sigma_z2: f64,
}

impl LinearFlowModel {
    pub fn new(t_steps: usize, u: Vec<Vec<f64>>, v: Vec<f64>, sigma_z2: f64) -> Result<Self> {
        ensure(t_steps >= 3, || format!("T = {t_steps} must be >= 3"))?;
        if u.len() != t_steps - 1 {
            return Err(Error::ShapeMismatch { expected: t_steps - 1, got: u.len() });
        }
        if v.len() != t_steps - 1 {
            return Err(Error::ShapeMismatch { expected: t_steps - 1, got: v.len() });
        }
        let d = u[0].len();
        ensure(d >= 1, || "feature dimension must be >= 1".into())?;
        if let Some(bad) = u.iter().find(|ui| ui.len() != d) {
            return Err(Error::ShapeMismatch { expected: d, got: bad.len() });
        }
        ensure(sigma_z2 > 0.0 && sigma_z2.is_finite(), || "noise variance must be positive".into())?;
        Ok(Self { t_steps, u, v, sigma_z2 })
    }

    /// Gaussian slices with standard deviation `scale`.
    pub fn random(t_steps: usize, dim: usize, scale: f64, sigma_z2: f64, seed: u64) -> Result<Self> {
        ensure(t_steps >= 3 && dim >= 1, || "need T >= 3 and d >= 1".into())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = || {
            let (a, b): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
            (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos()
        };
        let u = (0..t_steps - 1).map(|_| (0..dim).map(|_| scale * gauss()).collect()).collect();
        let v = (0..t_steps - 1).map(|_| scale * gauss()).collect();
        Self::new(t_steps, u, v, sigma_z2)
    }

    pub fn n_slices(&self) -> usize {
        self.t_steps - 1
    }

    pub fn dim(&self) -> usize {
        self.u[0].len()
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.t_steps - 1) as f64
    }

    pub fn alpha(&self, slice: usize) -> f64 {
        (self.t_steps - 1 - slice) as f64 / (self.t_steps - 1) as f64
    }

    /// `[u_0, v_0, u_1, v_1, ...]`.
    pub fn to_state(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_slices() * (self.dim() + 1));
        for (u, v) in self.u.iter().zip(&self.v) {
            out.extend_from_slice(u);
            out.push(*v);
        }
        out
    }

    pub fn set_state(&mut self, state: &[f64]) {
        let d = self.dim();
        for (j, w) in state.chunks_exact(d + 1).enumerate() {
            self.u[j].copy_from_slice(&w[..d]);
            self.v[j] = w[d];
        }
    }

    /// `sum_i beta_i u_i`: the mean predictor is `w_eff^T x`.
    pub fn effective_weight(&self) -> Vec<f64> {
        let beta = beta_coefficients(self);
        let mut w = vec![0.0; self.dim()];
        for (b, u) in beta.iter().zip(&self.u) {
            for (wk, uk) in w.iter_mut().zip(u) {
                *wk += b * uk;
            }
        }
        w
    }

    /// Coefficient of `z` in the predictor: `prod_j (1 + h v_j)`.
    pub fn noise_gain(&self) -> f64 {
        let h = self.h();
        self.v.iter().map(|v| 1.0 + h * v).product()
    }
}

/// `s_T` by direct recursion from `s_1 = z`.
pub fn unroll_predictor(model: &LinearFlowModel, x: &[f64], z: f64) -> f64 {
    let h = model.h();
    let mut s = z;
    for (u, v) in model.u.iter().zip(&model.v) {
        let ux: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
        s = (1.0 + h * v) * s + h * ux;
    }
    s
}

/// `beta_i = h prod_{j > i} (1 + h v_j)`.
pub fn beta_coefficients(model: &LinearFlowModel) -> Vec<f64> {
    let h = model.h();
    let n = model.n_slices();
    let mut beta = vec![0.0; n];
    let mut acc = h;
    for i in (0..n).rev() {
        beta[i] = acc;
        acc *= 1.0 + h * model.v[i];
    }
    beta
}

/// Mean predictor `f_FM(x) = sum_i beta_i u_i^T x`.
pub fn mean_predictor(model: &LinearFlowModel, x: &[f64]) -> f64 {
    model.effective_weight().iter().zip(x).map(|(a, b)| a * b).sum()
}
