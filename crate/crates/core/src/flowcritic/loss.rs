use rand::Rng;

use super::config::{FlowCriticConfig, TimeSampling};
use super::targets::{noisy_velocity_target, TargetFlow};
use crate::diffnet::{ForwardTrace, NetParams};
use crate::error::{Error, Result};

/// Regression sample with a precomputed scalar target `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSample {
    pub features: Vec<f64>,
    pub target: f64,
}

/// Where a distributional sample's return comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PushforwardTarget {
    /// A fixed return (e.g. a Monte Carlo return).
    Fixed(f64),
    /// `reward + discount * psi_target(1, z' | next_features)`; `discount` is 0 on terminals.
    Bootstrap { reward: f64, discount: f64, next_features: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistSample {
    pub features: Vec<f64>,
    pub target: PushforwardTarget,
}

fn sample_time<R: Rng + ?Sized>(config: &FlowCriticConfig, rng: &mut R) -> f64 {
    match config.time_sampling {
        TimeSampling::Uniform => rng.gen::<f64>(),
        TimeSampling::Fixed(t) => t,
    }
}

/// Accumulates mean squared error between network outputs and targets over
/// `(z_t, t, features, target)` items.
struct Regression<'p> {
    params: &'p NetParams,
    input: Vec<f64>,
    trace: ForwardTrace,
    grad: Vec<f64>,
    loss: f64,
    n: usize,
}

impl<'p> Regression<'p> {
    fn new(params: &'p NetParams, batch_len: usize) -> Result<Self> {
        if batch_len == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Self {
            params,
            input: Vec::new(),
            trace: ForwardTrace::default(),
            grad: vec![0.0; params.n_params()],
            loss: 0.0,
            n: batch_len,
        })
    }

    fn add(&mut self, z_t: f64, t: f64, features: &[f64], target: f64) -> Result<()> {
        self.input.clear();
        self.input.push(z_t);
        self.input.push(t);
        self.input.extend_from_slice(features);
        self.params.forward_into(&self.input, &mut self.trace)?;
        let err = self.trace.output()[0] - target;
        self.loss += err * err / self.n as f64;
        self.params.backward(&self.trace, &[2.0 * err / self.n as f64], &mut self.grad)
    }

    fn finish(self) -> Result<(f64, Vec<f64>)> {
        if !self.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {}", self.loss)));
        }
        Ok((self.loss, self.grad))
    }
}

/// Flow-matching loss toward a Dirac at each sample's target.
///
/// Per sample: `z ~ Unif[l, u]`, `t` per `config.time_sampling`, interpolant
/// `(1 - t) z + t y`, velocity target `y - z` (plus `Unif[-kappa, kappa]` noise).
pub fn floq_loss_and_grad<R: Rng + ?Sized>(
    params: &NetParams,
    config: &FlowCriticConfig,
    batch: &[ValueSample],
    velocity_noise: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let mut reg = Regression::new(params, batch.len())?;
    for s in batch {
        let z = rng.gen_range(config.noise_low..config.noise_high);
        let t = sample_time(config, rng);
        let z_t = (1.0 - t) * z + t * s.target;
        let v_target = noisy_velocity_target(s.target - z, velocity_noise, rng);
        reg.add(z_t, t, &s.features, v_target)?;
    }
    reg.finish()
}

/// Distributional flow-matching loss. Per sample: `z`, `t`, then an independent
/// `z'` pushed through `target_flow` to form the return sample `Z`; the
/// interpolant is `(1 - t) z + t Z` and the velocity target `Z - z`.
pub fn distributional_loss_and_grad<R: Rng + ?Sized>(
    params: &NetParams,
    config: &FlowCriticConfig,
    batch: &[DistSample],
    target_flow: &mut impl TargetFlow,
    velocity_noise: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let mut reg = Regression::new(params, batch.len())?;
    for s in batch {
        let z = rng.gen_range(config.noise_low..config.noise_high);
        let t = sample_time(config, rng);
        let z_next = rng.gen_range(config.noise_low..config.noise_high);
        let ret = match &s.target {
            PushforwardTarget::Fixed(g) => *g,
            PushforwardTarget::Bootstrap { reward, discount, next_features } => {
                if *discount == 0.0 {
                    *reward
                } else {
                    reward + discount * target_flow.terminal_value(next_features, z_next, config.integration_steps)
                }
            }
        };
        let z_t = (1.0 - t) * z + t * ret;
        let v_target = noisy_velocity_target(ret - z, velocity_noise, rng);
        reg.add(z_t, t, &s.features, v_target)?;
    }
    reg.finish()
}

/// Ablation: same interpolants as [`floq_loss_and_grad`] but the network is
/// supervised with `y` itself instead of `y - z`.
pub fn predict_target_loss_and_grad<R: Rng + ?Sized>(
    params: &NetParams,
    config: &FlowCriticConfig,
    batch: &[ValueSample],
    target_noise: f64,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let mut reg = Regression::new(params, batch.len())?;
    for s in batch {
        let z = rng.gen_range(config.noise_low..config.noise_high);
        let t = sample_time(config, rng);
        let z_t = (1.0 - t) * z + t * s.target;
        let target = noisy_velocity_target(s.target, target_noise, rng);
        reg.add(z_t, t, &s.features, target)?;
    }
    reg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Activation, Layer, LayerSpec, NetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> FlowCriticConfig {
        FlowCriticConfig::for_reward_range(0.0, 1.0, 0.9)
    }

    /// Linear net computing `w . [z, t, x] + b`.
    fn linear(w: Vec<f64>, b: f64) -> NetParams {
        let spec = LayerSpec { in_dim: w.len(), out_dim: 1, activation: Activation::Identity, layernorm: false, residual: false };
        NetParams::from_layers(vec![Layer { spec, weight: w, bias: vec![b], norm: None }]).unwrap()
    }

    #[test]
    fn exact_velocity_has_zero_loss() {
        // v(z_t, t) = (y - z_t)/(1 - t) equals y - z on the interpolant; with t fixed at 0
        // a linear net `y - z_t` represents it exactly.
        let y = 2.0;
        let net = linear(vec![-1.0, 0.0, 0.0], y);
        let c = FlowCriticConfig { time_sampling: TimeSampling::Fixed(0.0), ..cfg() };
        let batch = vec![ValueSample { features: vec![1.0], target: y }; 8];
        let (loss, grad) = floq_loss_and_grad(&net, &c, &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(loss < 1e-24);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn single_sample_by_hand() {
        let net = linear(vec![0.3, -0.2, 0.5], 0.1);
        let c = cfg();
        let batch = [ValueSample { features: vec![2.0], target: 1.5 }];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (loss, _) = floq_loss_and_grad(&net, &c, &batch, 0.0, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z = rng.gen_range(c.noise_low..c.noise_high);
        let t: f64 = rng.gen();
        let z_t = (1.0 - t) * z + t * 1.5;
        let v = 0.3 * z_t - 0.2 * t + 0.5 * 2.0 + 0.1;
        assert!((loss - (v - (1.5 - z)).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn predict_target_zero_loss_and_differs_from_velocity() {
        let net = linear(vec![0.0, 0.0, 0.0], 3.0);
        let batch = vec![ValueSample { features: vec![1.0], target: 3.0 }; 4];
        let (loss, _) = predict_target_loss_and_grad(&net, &cfg(), &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(loss, 0.0);
        let (_, g_flow) = floq_loss_and_grad(&net, &cfg(), &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, g_pred) = predict_target_loss_and_grad(&net, &cfg(), &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(g_flow, g_pred);
    }

    #[test]
    fn degenerate_pushforward_matches_floq() {
        // A target flow collapsing every z' to Q makes each return sample r + gamma Q.
        let net = NetConfig { width: 6, depth: 2, ..NetConfig::new(3, 1) }.build(4).unwrap();
        let c = cfg();
        let (r, q) = (0.2, 3.0);
        for seed in 0..20 {
            let dist = [DistSample {
                features: vec![1.0],
                target: PushforwardTarget::Bootstrap { reward: r, discount: c.gamma, next_features: vec![0.0] },
            }];
            let mut flow = |_: &[f64], _z: f64, _k: usize| q;
            let (ld, gd) =
                distributional_loss_and_grad(&net, &c, &dist, &mut flow, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let floq = [ValueSample { features: vec![1.0], target: r + c.gamma * q }];
            let (lf, gf) = floq_loss_and_grad(&net, &c, &floq, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!((ld - lf).abs() < 1e-12);
            for (a, b) in gd.iter().zip(&gf) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_pushforward_velocity_has_zero_loss() {
        let net = linear(vec![-1.0, 0.0, 0.0], 1.0);
        let c = FlowCriticConfig { time_sampling: TimeSampling::Fixed(0.0), ..cfg() };
        let batch = vec![DistSample { features: vec![0.0], target: PushforwardTarget::Fixed(1.0) }; 5];
        let mut flow = |_: &[f64], _z: f64, _k: usize| unreachable!();
        let (loss, _) =
            distributional_loss_and_grad(&net, &c, &batch, &mut flow, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(loss < 1e-24);
    }

    #[test]
    fn empty_batch_rejected() {
        let net = linear(vec![0.0; 3], 0.0);
        assert!(floq_loss_and_grad(&net, &cfg(), &[], 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
