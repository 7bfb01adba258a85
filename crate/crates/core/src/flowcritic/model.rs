use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{FlowCriticConfig, FlowLoss, TargetUpdate};
use super::field::{mean_terminal, NetField, OutputMode};
use super::loss::{
    distributional_loss_and_grad, floq_loss_and_grad, predict_target_loss_and_grad, DistSample, PushforwardTarget, ValueSample,
};
use super::targets::NetTargetFlow;
use crate::diffnet::{ForwardTrace, NetConfig, NetParams};
use crate::error::Result;
use crate::training::{self, CriticModel, Interventions, Schedule, TrainOutcome, TrainSample, TrainTarget, TrainingData};

/// Flow-matching critic: a velocity network over `[z, t, features]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCritic {
    pub config: FlowCriticConfig,
    /// Trunk shape; input/output dims are filled in at init.
    pub net: NetConfig,
}

impl FlowCritic {
    pub fn new(config: FlowCriticConfig) -> Self {
        Self { config, net: NetConfig::new(0, 1) }
    }

    pub fn with_net(mut self, net: NetConfig) -> Self {
        self.net = net;
        self
    }

    pub fn output_mode(&self) -> OutputMode {
        match self.config.loss {
            FlowLoss::PredictTarget => OutputMode::FinalValue,
            _ => OutputMode::Velocity,
        }
    }

    /// Net config for a given feature dimension. The head is zeroed, so the
    /// initial flow is the identity map on noise.
    pub fn net_config(&self, feature_dim: usize) -> NetConfig {
        NetConfig { input_dim: feature_dim + 2, output_dim: 1, zero_init_head: true, ..self.net.clone() }
    }

    fn value_batch(batch: &[TrainSample]) -> Vec<ValueSample> {
        batch
            .iter()
            .map(|s| ValueSample {
                features: s.features.clone(),
                target: match s.target {
                    TrainTarget::Value(y) => y,
                    TrainTarget::Bootstrap { .. } => unreachable!("value losses receive scalar targets"),
                },
            })
            .collect()
    }
}

impl CriticModel for FlowCritic {
    fn tag(&self) -> String {
        let loss = match self.config.loss {
            FlowLoss::Expected => "expected",
            FlowLoss::Distributional => "distributional",
            FlowLoss::PredictTarget => "predict-target",
        };
        format!("flow-{loss}-k{}", self.config.integration_steps)
    }

    fn gamma(&self) -> f64 {
        self.config.gamma
    }

    fn target_update(&self) -> TargetUpdate {
        self.config.target_update
    }

    fn n_eval(&self) -> usize {
        self.config.n_eval
    }

    fn init_params(&self, feature_dim: usize, seed: u64) -> Result<NetParams> {
        self.config.validate()?;
        self.net_config(feature_dim).build(seed)
    }

    fn q_value(&self, params: &NetParams, features: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut field = NetField::new(params, features, self.output_mode())?;
        mean_terminal(&mut field, &self.config, n, rng)
    }

    fn target_value(&self, target: &NetParams, features: &[f64], rng: &mut ChaCha8Rng) -> Result<f64> {
        self.q_value(target, features, self.config.target_samples, rng)
    }

    fn pushforward_targets(&self) -> bool {
        self.config.loss == FlowLoss::Distributional
    }

    fn loss_and_grad(
        &self,
        params: &NetParams,
        target: &NetParams,
        batch: &[TrainSample],
        target_noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<f64>)> {
        match self.config.loss {
            FlowLoss::Expected => floq_loss_and_grad(params, &self.config, &Self::value_batch(batch), target_noise, rng),
            FlowLoss::PredictTarget => {
                predict_target_loss_and_grad(params, &self.config, &Self::value_batch(batch), target_noise, rng)
            }
            FlowLoss::Distributional => {
                let dist: Vec<DistSample> = batch
                    .iter()
                    .map(|s| DistSample {
                        features: s.features.clone(),
                        target: match &s.target {
                            TrainTarget::Value(y) => PushforwardTarget::Fixed(*y),
                            TrainTarget::Bootstrap { reward, discount, next_features } => PushforwardTarget::Bootstrap {
                                reward: *reward,
                                discount: *discount,
                                next_features: next_features.clone(),
                            },
                        },
                    })
                    .collect();
                let mut flow = NetTargetFlow::new(target, self.output_mode())?;
                distributional_loss_and_grad(params, &self.config, &dist, &mut flow, target_noise, rng)
            }
        }
    }

    /// Trace at the midpoint of the noise range and `t = 0`.
    fn probe_trace(&self, params: &NetParams, features: &[f64]) -> Result<ForwardTrace> {
        let mut input = Vec::with_capacity(features.len() + 2);
        input.push(0.5 * (self.config.noise_low + self.config.noise_high));
        input.push(0.0);
        input.extend_from_slice(features);
        Ok(params.forward(&input)?.1)
    }
}

pub fn train_flow_critic(
    critic: &FlowCritic,
    data: &TrainingData,
    schedule: &Schedule,
    interventions: &Interventions,
    seed: u64,
) -> Result<TrainOutcome> {
    training::train(critic, data, schedule, interventions, seed)
}
