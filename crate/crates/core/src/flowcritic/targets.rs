use rand::Rng;

use super::config::FlowCriticConfig;
use super::field::{integrate_terminal, NetField, OutputMode, VelocityField};
use crate::diffnet::NetParams;
use crate::error::{Error, Result};

/// Averaged TD target `y = r + gamma * mean_j psi(1, z'_j)`, zero bootstrap on terminals.
#[derive(Debug, Clone, PartialEq)]
pub struct TdTarget {
    pub value: f64,
    /// Integrated target-flow values, one per noise draw. Empty for terminal transitions.
    pub samples: Vec<f64>,
}

/// `next_field` must already be bound to `(s', a')`.
pub fn expected_td_target<R: Rng + ?Sized>(
    next_field: &mut impl VelocityField,
    config: &FlowCriticConfig,
    reward: f64,
    terminal: bool,
    rng: &mut R,
) -> Result<TdTarget> {
    if terminal {
        return Ok(TdTarget { value: reward, samples: Vec::new() });
    }
    let samples: Vec<f64> = (0..config.target_samples)
        .map(|_| {
            let z = rng.gen_range(config.noise_low..config.noise_high);
            integrate_terminal(next_field, z, config.integration_steps)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let value = reward + config.gamma * mean;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("TD target {value}")));
    }
    Ok(TdTarget { value, samples })
}

/// One pushed-forward return sample `r + gamma * psi(1, z')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistTarget {
    pub value: f64,
    pub noise: f64,
}

pub fn dist_target<R: Rng + ?Sized>(
    next_field: &mut impl VelocityField,
    config: &FlowCriticConfig,
    reward: f64,
    terminal: bool,
    rng: &mut R,
) -> DistTarget {
    let noise = rng.gen_range(config.noise_low..config.noise_high);
    let value =
        if terminal { reward } else { reward + config.gamma * integrate_terminal(next_field, noise, config.integration_steps) };
    DistTarget { value, noise }
}

/// Adds one draw from `Unif[-kappa, kappa]`. No randomness is consumed when `kappa == 0`.
pub fn noisy_velocity_target<R: Rng + ?Sized>(target: f64, kappa: f64, rng: &mut R) -> f64 {
    if kappa > 0.0 {
        target + rng.gen_range(-kappa..=kappa)
    } else {
        target
    }
}

/// Terminal value of a (target) flow for arbitrary `(s', a')` features.
pub trait TargetFlow {
    fn terminal_value(&mut self, next_features: &[f64], z: f64, steps: usize) -> f64;
}

impl<F: FnMut(&[f64], f64, usize) -> f64> TargetFlow for F {
    fn terminal_value(&mut self, next_features: &[f64], z: f64, steps: usize) -> f64 {
        self(next_features, z, steps)
    }
}

/// Integrates a parameter snapshot.
pub struct NetTargetFlow<'a> {
    field: NetField<'a>,
}

impl<'a> NetTargetFlow<'a> {
    pub fn new(params: &'a NetParams, mode: OutputMode) -> Result<Self> {
        let features = vec![0.0; params.input_dim().saturating_sub(2)];
        Ok(Self { field: NetField::new(params, &features, mode)? })
    }
}

impl TargetFlow for NetTargetFlow<'_> {
    fn terminal_value(&mut self, next_features: &[f64], z: f64, steps: usize) -> f64 {
        self.field.set_features(next_features);
        integrate_terminal(&mut self.field, z, steps)
    }
}
