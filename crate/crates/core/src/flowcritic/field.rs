use rand::Rng;

use super::config::FlowCriticConfig;
use crate::diffnet::{NetParams, Scratch};
use crate::error::{Error, Result};

/// A scalar time-dependent velocity field `v(z, t)` for one fixed (s, a).
pub trait VelocityField {
    fn velocity(&mut self, z: f64, t: f64) -> f64;
}

impl<F: FnMut(f64, f64) -> f64> VelocityField for F {
    fn velocity(&mut self, z: f64, t: f64) -> f64 {
        self(z, t)
    }
}

/// How a network's scalar output is read during integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    /// The output is the velocity.
    Velocity,
    /// The output predicts the final value `y`; the implied velocity is
    /// `(y_hat - z) / (1 - t)`, so the last Euler step lands on `y_hat`.
    FinalValue,
}

/// A velocity network bound to the features of one (s, a) pair.
/// Network input layout: `[z, t, features...]`.
pub struct NetField<'a> {
    params: &'a NetParams,
    mode: OutputMode,
    input: Vec<f64>,
    scratch: Scratch,
}

impl<'a> NetField<'a> {
    pub fn new(params: &'a NetParams, features: &[f64], mode: OutputMode) -> Result<Self> {
        if params.input_dim() != features.len() + 2 {
            return Err(Error::ShapeMismatch { expected: params.input_dim(), got: features.len() + 2 });
        }
        if params.output_dim() != 1 {
            return Err(Error::ShapeMismatch { expected: 1, got: params.output_dim() });
        }
        let mut input = Vec::with_capacity(features.len() + 2);
        input.extend_from_slice(&[0.0, 0.0]);
        input.extend_from_slice(features);
        Ok(Self { params, mode, input, scratch: Scratch::default() })
    }

    /// Rebinds to a different (s, a) without reallocating.
    pub fn set_features(&mut self, features: &[f64]) {
        self.input.truncate(2);
        self.input.extend_from_slice(features);
    }

    pub fn set_params(&mut self, params: &'a NetParams) {
        self.params = params;
    }

    pub fn raw_output(&mut self, z: f64, t: f64) -> f64 {
        self.input[0] = z;
        self.input[1] = t;
        self.params.eval_unchecked(&self.input, &mut self.scratch)[0]
    }
}

impl VelocityField for NetField<'_> {
    fn velocity(&mut self, z: f64, t: f64) -> f64 {
        let out = self.raw_output(z, t);
        match self.mode {
            OutputMode::Velocity => out,
            OutputMode::FinalValue => (out - z) / (1.0 - t),
        }
    }
}

/// Euler trajectory `psi^0 .. psi^K` with the velocity used at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationTrace {
    pub psi: Vec<f64>,
    pub velocities: Vec<f64>,
}

impl IntegrationTrace {
    pub fn steps(&self) -> usize {
        self.velocities.len()
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps() as f64
    }

    pub fn terminal(&self) -> f64 {
        *self.psi.last().unwrap()
    }
}

/// Integrates with a per-step velocity oracle `f(k, z, t)` and optional additive
/// perturbations `xi[k]`. Shared by plain, perturbed and stale integration.
pub fn integrate_with(
    z0: f64,
    steps: usize,
    mut f: impl FnMut(usize, f64, f64) -> f64,
    xi: Option<&[f64]>,
) -> Result<IntegrationTrace> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integration needs at least one step".into()));
    }
    if let Some(xi) = xi {
        if xi.len() != steps {
            return Err(Error::ShapeMismatch { expected: steps, got: xi.len() });
        }
    }
    let eta = 1.0 / steps as f64;
    let mut psi = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps);
    psi.push(z0);
    let mut z = z0;
    for k in 0..steps {
        let t = k as f64 * eta;
        let v = f(k, z, t) + xi.map_or(0.0, |xi| xi[k]);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("velocity {v} at step {k} (z = {z}, t = {t}); trajectory so far {psi:?}")));
        }
        z += eta * v;
        velocities.push(v);
        psi.push(z);
    }
    Ok(IntegrationTrace { psi, velocities })
}

/// `psi^{k+1} = psi^k + eta * v(psi^k, t_k)`, `eta = 1/K`, `t_k = k/K`.
pub fn euler_integrate(field: &mut impl VelocityField, z0: f64, steps: usize) -> Result<IntegrationTrace> {
    integrate_with(z0, steps, |_, z, t| field.velocity(z, t), None)
}

/// Terminal value only; no allocation. Non-finite results are returned as-is.
pub fn integrate_terminal(field: &mut impl VelocityField, z0: f64, steps: usize) -> f64 {
    let eta = 1.0 / steps as f64;
    let mut z = z0;
    for k in 0..steps {
        z += eta * field.velocity(z, k as f64 * eta);
    }
    z
}

/// Mean of `n` integrations from `z ~ Unif[l, u]`.
pub fn mean_terminal<R: Rng + ?Sized>(
    field: &mut impl VelocityField,
    config: &FlowCriticConfig,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut acc = 0.0;
    for _ in 0..n {
        let z0 = rng.gen_range(config.noise_low..config.noise_high);
        acc += integrate_terminal(field, z0, config.integration_steps);
    }
    let q = acc / n as f64;
    if !q.is_finite() {
        return Err(Error::NonFinite(format!("integrated value {q}")));
    }
    Ok(q)
}

/// Q-value estimate: mean of `config.n_eval` integrations.
pub fn q_value<R: Rng + ?Sized>(field: &mut impl VelocityField, config: &FlowCriticConfig, rng: &mut R) -> Result<f64> {
    mean_terminal(field, config, config.n_eval, rng)
}
