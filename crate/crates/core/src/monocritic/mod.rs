//! Monolithic baselines: MLP and ResNet critics mapping `features(s, a)` to a
//! scalar Q in one forward pass, fixed-weight ensembles, and the single-step
//! flow ablation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Architecture, ForwardTrace, NetConfig, NetParams, Scratch};
use crate::error::{ensure, Error, Result};
use crate::flowcritic::{noisy_velocity_target, TargetUpdate, ValueSample};
use crate::training::{self, CriticModel, Interventions, Schedule, TrainOutcome, TrainSample, TrainTarget, TrainingData};

pub use crate::flowcritic::single_step_flow_ablation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonoCritic {
    /// Trunk shape; input/output dims are filled in at init.
    pub net: NetConfig,
    pub gamma: f64,
    pub target_update: TargetUpdate,
}

impl MonoCritic {
    pub fn new(gamma: f64) -> Self {
        Self { net: NetConfig::new(0, 1), gamma, target_update: TargetUpdate::default() }
    }

    pub fn resnet(gamma: f64) -> Self {
        let mut c = Self::new(gamma);
        c.net.architecture = Architecture::ResNet;
        c
    }

    pub fn with_net(mut self, net: NetConfig) -> Self {
        self.net = net;
        self
    }

    pub fn net_config(&self, feature_dim: usize) -> NetConfig {
        NetConfig { input_dim: feature_dim, output_dim: 1, ..self.net.clone() }
    }
}

/// Single-output network value.
pub fn mono_q(params: &NetParams, features: &[f64]) -> Result<f64> {
    let mut scratch = Scratch::default();
    Ok(params.eval(features, &mut scratch)?[0])
}

/// Mean squared TD error `(Q(s, a) - y)^2` and its gradient. With `target_noise > 0`
/// each `y` is perturbed by one `Unif[-kappa, kappa]` draw.
pub fn mono_td_loss_and_grad<R: Rng + ?Sized>(
    params: &NetParams,
    batch: &[ValueSample],
    target_noise: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.n_params()];
    let mut trace = ForwardTrace::default();
    let mut loss = 0.0;
    for s in batch {
        let y = noisy_velocity_target(s.target, target_noise, rng);
        params.forward_into(&s.features, &mut trace)?;
        let err = trace.output()[0] - y;
        loss += err * err / n;
        params.backward(&trace, &[2.0 * err / n], &mut grad)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    Ok((loss, grad))
}

impl CriticModel for MonoCritic {
    fn tag(&self) -> String {
        match self.net.architecture {
            Architecture::Mlp => "mono-mlp".into(),
            Architecture::ResNet => "mono-resnet".into(),
        }
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn target_update(&self) -> TargetUpdate {
        self.target_update
    }

    fn n_eval(&self) -> usize {
        1
    }

    fn init_params(&self, feature_dim: usize, seed: u64) -> Result<NetParams> {
        ensure((0.0..1.0).contains(&self.gamma), || format!("gamma {} not in [0, 1)", self.gamma))?;
        self.net_config(feature_dim).build(seed)
    }

    fn q_value(&self, params: &NetParams, features: &[f64], _n: usize, _rng: &mut ChaCha8Rng) -> Result<f64> {
        mono_q(params, features)
    }

    fn target_value(&self, target: &NetParams, features: &[f64], _rng: &mut ChaCha8Rng) -> Result<f64> {
        mono_q(target, features)
    }

    fn loss_and_grad(
        &self,
        params: &NetParams,
        _target: &NetParams,
        batch: &[TrainSample],
        target_noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<f64>)> {
        let batch: Vec<ValueSample> = batch
            .iter()
            .map(|s| match s.target {
                TrainTarget::Value(y) => Ok(ValueSample { features: s.features.clone(), target: y }),
                TrainTarget::Bootstrap { .. } => Err(Error::InvalidArgument("monolithic critics need scalar targets".into())),
            })
            .collect::<Result<_>>()?;
        mono_td_loss_and_grad(params, &batch, target_noise, rng)
    }

    fn probe_trace(&self, params: &NetParams, features: &[f64]) -> Result<ForwardTrace> {
        Ok(params.forward(features)?.1)
    }
}

pub fn train_mono_critic(
    critic: &MonoCritic,
    data: &TrainingData,
    schedule: &Schedule,
    interventions: &Interventions,
    seed: u64,
) -> Result<TrainOutcome> {
    training::train(critic, data, schedule, interventions, seed)
}

/// Fixed mixture of monolithic critics.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticEnsemble {
    members: Vec<NetParams>,
    weights: Vec<f64>,
}

impl CriticEnsemble {
    pub fn new(members: Vec<NetParams>, weights: Vec<f64>) -> Result<Self> {
        ensure(!members.is_empty(), || "ensemble needs at least one member".into())?;
        if members.len() != weights.len() {
            return Err(Error::ShapeMismatch { expected: members.len(), got: weights.len() });
        }
        ensure(weights.iter().all(|w| w.is_finite() && *w >= 0.0), || "mixture weights must be finite and >= 0".into())?;
        let total: f64 = weights.iter().sum();
        ensure((total - 1.0).abs() <= 1e-12, || format!("mixture weights sum to {total}, not 1"))?;
        if members.iter().any(|m| !m.same_topology(&members[0])) {
            return Err(Error::TopologyMismatch("ensemble members differ in topology".into()));
        }
        ensure(members[0].output_dim() == 1, || "ensemble members must output a scalar".into())?;
        Ok(Self { members, weights })
    }

    /// Uniform weights.
    pub fn uniform(members: Vec<NetParams>) -> Result<Self> {
        let n = members.len().max(1);
        Self::new(members, vec![1.0 / n as f64; n])
    }

    pub fn members(&self) -> &[NetParams] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `sum_p pi_p f_p(features)`.
pub fn ensemble_q(ensemble: &CriticEnsemble, features: &[f64]) -> Result<f64> {
    let mut scratch = Scratch::default();
    let mut q = 0.0;
    for (m, w) in ensemble.members.iter().zip(&ensemble.weights) {
        q += w * m.eval(features, &mut scratch)?[0];
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn net(seed: u64) -> NetParams {
        NetConfig { width: 6, depth: 2, ..NetConfig::new(3, 1) }.build(seed).unwrap()
    }

    /// Net whose head is zero with bias `b`: outputs exactly `b`.
    fn constant(b: f64) -> NetParams {
        let mut layers = net(0).layers();
        let head = layers.last_mut().unwrap();
        head.weight.fill(0.0);
        head.bias[0] = b;
        NetParams::from_layers(layers).unwrap()
    }

    #[test]
    fn exact_fit_has_zero_loss() {
        let p = constant(2.5);
        let batch = vec![ValueSample { features: vec![1.0, 0.0, -1.0], target: 2.5 }; 4];
        let (loss, grad) = mono_td_loss_and_grad(&p, &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn single_sample_by_hand() {
        let p = net(3);
        let x = vec![0.3, -0.7, 1.1];
        let q = mono_q(&p, &x).unwrap();
        let batch = vec![ValueSample { features: x, target: 0.25 }];
        let (loss, _) = mono_td_loss_and_grad(&p, &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((loss - (q - 0.25).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn noise_perturbs_targets() {
        let p = constant(0.0);
        let batch = vec![ValueSample { features: vec![0.0; 3], target: 0.0 }; 2000];
        let (loss, _) = mono_td_loss_and_grad(&p, &batch, 3.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // E[U^2] for U ~ Unif[-3, 3] is 3
        assert!((loss - 3.0).abs() < 0.25, "{loss}");
    }

    #[test]
    fn ensemble_weighting() {
        let e = CriticEnsemble::new(vec![constant(2.0), constant(4.0)], vec![0.5, 0.5]).unwrap();
        assert!((ensemble_q(&e, &[0.0, 1.0, 2.0]).unwrap() - 3.0).abs() < 1e-15);
        let same = CriticEnsemble::uniform(vec![net(4); 3]).unwrap();
        let x = [0.2, 0.1, -0.4];
        assert!((ensemble_q(&same, &x).unwrap() - mono_q(&net(4), &x).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn ensemble_validation() {
        assert!(CriticEnsemble::new(vec![net(0), net(1)], vec![0.5, 0.6]).is_err());
        assert!(CriticEnsemble::new(vec![net(0)], vec![0.5, 0.5]).is_err());
        assert!(CriticEnsemble::new(vec![], vec![]).is_err());
        let other = NetConfig { width: 7, depth: 2, ..NetConfig::new(3, 1) }.build(0).unwrap();
        assert!(matches!(CriticEnsemble::new(vec![net(0), other], vec![0.5, 0.5]), Err(Error::TopologyMismatch(_))));
    }
}
