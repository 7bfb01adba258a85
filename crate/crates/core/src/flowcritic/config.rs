use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TargetUpdate {
    /// Copy online parameters into the target every `every` steps.
    Hard { every: usize },
    /// `target <- tau * online + (1 - tau) * target` after every step.
    Polyak { tau: f64 },
}

impl Default for TargetUpdate {
    fn default() -> Self {
        TargetUpdate::Hard { every: 100 }
    }
}

/// Which objective trains the velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowLoss {
    /// Regress velocities toward `y - z` with `y` an averaged TD target.
    Expected,
    /// Regress toward `Z - z` where `Z` pushes one noise draw through the target flow.
    Distributional,
    /// Ablation: the network predicts `y` itself at every interpolant.
    PredictTarget,
}

/// Distribution of the training-time interpolation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeSampling {
    Uniform,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCriticConfig {
    /// Euler steps per integration.
    pub integration_steps: usize,
    pub noise_low: f64,
    pub noise_high: f64,
    /// Noise samples averaged into each expected-value TD target.
    pub target_samples: usize,
    /// Integrations averaged by `q_value`, also used for greedy action selection.
    pub n_eval: usize,
    pub gamma: f64,
    pub target_update: TargetUpdate,
    pub loss: FlowLoss,
    pub time_sampling: TimeSampling,
}

impl FlowCriticConfig {
    /// Noise range `[q_min - 1, q_max + 1]` with the value range implied by
    /// rewards in `[reward_min, reward_max]` and discount `gamma`.
    pub fn for_reward_range(reward_min: f64, reward_max: f64, gamma: f64) -> Self {
        let horizon = 1.0 / (1.0 - gamma);
        let q_min = reward_min.min(0.0) * horizon;
        let q_max = reward_max.max(0.0) * horizon;
        Self {
            integration_steps: 8,
            noise_low: q_min - 1.0,
            noise_high: q_max + 1.0,
            target_samples: 4,
            n_eval: 4,
            gamma,
            target_update: TargetUpdate::default(),
            loss: FlowLoss::Expected,
            time_sampling: TimeSampling::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.integration_steps >= 1, || "integration steps must be >= 1".into())?;
        ensure(self.noise_low < self.noise_high, || format!("noise range [{}, {}] is empty", self.noise_low, self.noise_high))?;
        ensure(self.target_samples >= 1, || "target sample count must be >= 1".into())?;
        ensure(self.n_eval >= 1, || "n_eval must be >= 1".into())?;
        ensure((0.0..1.0).contains(&self.gamma), || format!("gamma {} not in [0, 1)", self.gamma))?;
        match self.target_update {
            TargetUpdate::Hard { every } => ensure(every >= 1, || "hard update period must be >= 1".into())?,
            TargetUpdate::Polyak { tau } => ensure(tau > 0.0 && tau <= 1.0, || format!("polyak tau {tau} not in (0, 1]"))?,
        }
        if let TimeSampling::Fixed(t) = self.time_sampling {
            ensure((0.0..1.0).contains(&t), || format!("fixed training time {t} not in [0, 1)"))?;
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.integration_steps as f64
    }
}

/// Single integration step trained only at `t = 0`.
pub fn single_step_flow_ablation(config: &FlowCriticConfig) -> FlowCriticConfig {
    FlowCriticConfig { integration_steps: 1, time_sampling: TimeSampling::Fixed(0.0), ..config.clone() }
}
