//! Central finite differences against every analytic loss gradient, shared by
//! the gradient tests and the acceptance runner.
#![allow(dead_code)]

use flowtd_core::diffnet::{Activation, Architecture, NetConfig, NetParams};
use flowtd_core::flowcritic::{
    distributional_loss_and_grad, floq_loss_and_grad, predict_target_loss_and_grad, DistSample, FlowCriticConfig, NetTargetFlow,
    OutputMode, PushforwardTarget, TimeSampling, ValueSample,
};
use flowtd_core::monocritic::mono_td_loss_and_grad;
use flowtd_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: u64 = 50;
const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Random smooth network; ReLU kinks make finite differences meaningless.
pub fn random_net(rng: &mut ChaCha8Rng, input_dim: usize) -> NetConfig {
    NetConfig {
        width: rng.gen_range(2..=7),
        depth: rng.gen_range(1..=3),
        activation: if rng.gen_bool(0.8) { Activation::Gelu } else { Activation::Identity },
        layernorm: rng.gen_bool(0.5),
        architecture: if rng.gen_bool(0.5) { Architecture::Mlp } else { Architecture::ResNet },
        zero_init_head: false,
        ..NetConfig::new(input_dim, 1)
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, dim: usize) -> Vec<ValueSample> {
    let n = rng.gen_range(1..=6);
    (0..n)
        .map(|_| ValueSample { features: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(), target: rng.gen_range(-3.0..3.0) })
        .collect()
}

fn flow_config(rng: &mut ChaCha8Rng) -> FlowCriticConfig {
    let time_sampling = if rng.gen_bool(0.2) { TimeSampling::Fixed(rng.gen_range(0.0..0.9)) } else { TimeSampling::Uniform };
    FlowCriticConfig {
        integration_steps: rng.gen_range(1..=6),
        time_sampling,
        ..FlowCriticConfig::for_reward_range(-1.0, 1.0, 0.5)
    }
}

/// Largest relative gap between `grad` and central differences of `loss`,
/// which must replay the same randomness on every call.
pub fn max_rel_error(params: &NetParams, loss: impl Fn(&NetParams) -> Result<(f64, Vec<f64>)>) -> f64 {
    let (_, grad) = loss(params).unwrap();
    assert_eq!(grad.len(), params.n_params());
    let mut p = params.clone();
    let mut worst = 0.0f64;
    for (i, g) in grad.iter().enumerate() {
        let x = params.flat()[i];
        p.flat_mut()[i] = x + H;
        let up = loss(&p).unwrap().0;
        p.flat_mut()[i] = x - H;
        let down = loss(&p).unwrap().0;
        p.flat_mut()[i] = x;
        let fd = (up - down) / (2.0 * H);
        let scale = g.abs().max(fd.abs()).max(1e-3);
        worst = worst.max((g - fd).abs() / scale);
    }
    worst
}

fn suite(salt: u64, one: impl Fn(u64, &mut ChaCha8Rng) -> f64) -> std::result::Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..CONFIGS {
        let err = one(seed, &mut ChaCha8Rng::seed_from_u64(salt + seed));
        if err.is_nan() || err > REL_TOL {
            return Err(format!("config {seed}: relative error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn floq_suite() -> std::result::Result<f64, String> {
    suite(0, |seed, rng| {
        let dim = rng.gen_range(1..=4);
        let params = random_net(rng, dim + 2).build(seed).unwrap();
        let cfg = flow_config(rng);
        let batch = random_batch(rng, dim);
        let noise = if rng.gen_bool(0.3) { 0.5 } else { 0.0 };
        max_rel_error(&params, |p| floq_loss_and_grad(p, &cfg, &batch, noise, &mut ChaCha8Rng::seed_from_u64(seed)))
    })
}

pub fn predict_target_suite() -> std::result::Result<f64, String> {
    suite(100, |seed, rng| {
        let dim = rng.gen_range(1..=4);
        let params = random_net(rng, dim + 2).build(seed).unwrap();
        let cfg = flow_config(rng);
        let batch = random_batch(rng, dim);
        max_rel_error(&params, |p| predict_target_loss_and_grad(p, &cfg, &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)))
    })
}

pub fn distributional_suite() -> std::result::Result<f64, String> {
    suite(200, |seed, rng| {
        let dim = rng.gen_range(1..=4);
        let net = random_net(rng, dim + 2);
        let params = net.build(seed).unwrap();
        let target = net.build(seed + 1000).unwrap();
        let cfg = flow_config(rng);
        let batch: Vec<DistSample> = random_batch(rng, dim)
            .into_iter()
            .map(|s| {
                let target = if rng.gen_bool(0.3) {
                    PushforwardTarget::Fixed(s.target)
                } else {
                    PushforwardTarget::Bootstrap {
                        reward: s.target,
                        discount: if rng.gen_bool(0.2) { 0.0 } else { cfg.gamma },
                        next_features: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    }
                };
                DistSample { features: s.features, target }
            })
            .collect();
        max_rel_error(&params, |p| {
            let mut flow = NetTargetFlow::new(&target, OutputMode::Velocity)?;
            distributional_loss_and_grad(p, &cfg, &batch, &mut flow, 0.0, &mut ChaCha8Rng::seed_from_u64(seed))
        })
    })
}

pub fn mono_suite() -> std::result::Result<f64, String> {
    suite(300, |seed, rng| {
        let dim = rng.gen_range(1..=5);
        let params = random_net(rng, dim).build(seed).unwrap();
        let batch = random_batch(rng, dim);
        let noise = if rng.gen_bool(0.3) { 0.5 } else { 0.0 };
        max_rel_error(&params, |p| mono_td_loss_and_grad(p, &batch, noise, &mut ChaCha8Rng::seed_from_u64(seed)))
    })
}
