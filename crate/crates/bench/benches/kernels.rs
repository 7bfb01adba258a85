use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowtd_core::diffnet::NetConfig;
use flowtd_core::flowcritic::{
    floq_loss_and_grad, integrate_terminal, predict_target_loss_and_grad, FlowCritic, FlowCriticConfig, NetField, ValueSample,
};
use flowtd_core::lintheory::{integrate_flow, FlowOptions, LinearFlowModel, TargetProcess, TargetSchedule};
use flowtd_core::monocritic::mono_td_loss_and_grad;
use flowtd_core::probes::{audit_conic, fit_ttr_exponent, AuditGrid, ConicRegion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FEATURES: usize = 10;

fn batch(n: usize, seed: u64) -> Vec<ValueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut features = vec![0.0; FEATURES];
            features[rng.gen_range(0..FEATURES)] = 1.0;
            ValueSample { features, target: rng.gen_range(0.0..1.0) }
        })
        .collect()
}

fn euler(c: &mut Criterion) {
    let mut group = c.benchmark_group("euler");
    for k in [8usize, 64, 256] {
        group.bench_with_input(BenchmarkId::new("analytic", k), &k, |b, &k| {
            let mut field = |z: f64, t: f64| (0.7 - z) / (1.0 - t);
            b.iter(|| integrate_terminal(&mut field, black_box(0.3), k))
        });
    }
    let critic = FlowCritic::new(FlowCriticConfig::for_reward_range(0.0, 1.0, 0.9)).with_net(NetConfig {
        width: 32,
        depth: 2,
        ..NetConfig::new(0, 1)
    });
    let params = critic.net_config(FEATURES).build(0).unwrap();
    let x = batch(1, 1).remove(0).features;
    let mut field = NetField::new(&params, &x, critic.output_mode()).unwrap();
    group.bench_function("network_k8", |b| b.iter(|| integrate_terminal(&mut field, black_box(2.0), 8)));
    group.finish();
}

fn losses(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grad_b64");
    let cfg = FlowCriticConfig::for_reward_range(0.0, 1.0, 0.9);
    let critic = FlowCritic::new(cfg.clone()).with_net(NetConfig { width: 32, depth: 2, ..NetConfig::new(0, 1) });
    let flow_params = critic.net_config(FEATURES).build(0).unwrap();
    let mono_params = NetConfig { width: 32, depth: 2, ..NetConfig::new(FEATURES, 1) }.build(0).unwrap();
    let data = batch(64, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    group.bench_function("floq", |b| b.iter(|| floq_loss_and_grad(&flow_params, &cfg, &data, 0.0, &mut rng).unwrap()));
    group.bench_function("predict_target", |b| {
        b.iter(|| predict_target_loss_and_grad(&flow_params, &cfg, &data, 0.0, &mut rng).unwrap())
    });
    group.bench_function("mono_td", |b| b.iter(|| mono_td_loss_and_grad(&mono_params, &data, 0.0, &mut rng).unwrap()));
    group.finish();
}

fn probes(c: &mut Criterion) {
    let mut group = c.benchmark_group("probes");
    group.sample_size(10);
    let region = ConicRegion::new(3.0, 7.0, 3.5, 6.5, 16).unwrap();
    let grid = AuditGrid::square(200, 0.05);
    group.bench_function("conic_audit_200", |b| {
        let mut field = |z: f64, t: f64| 0.5 * (5.0 - z) / (1.0 - t);
        b.iter(|| audit_conic(&mut field, &region, 0.4, &grid).unwrap())
    });
    group.bench_function("ttr_fit", |b| {
        let mut field = |z: f64, t: f64| 0.5 * (5.0 - z) / (1.0 - t);
        b.iter(|| fit_ttr_exponent(&mut field, (3.0, 7.0), &[8, 16, 32, 64, 128], 64, 0.1, 0).unwrap())
    });
    group.finish();
}

fn linear_flow(c: &mut Criterion) {
    let process = TargetProcess::new(
        vec![vec![1.0, 0.0], vec![0.3, 1.0]],
        vec![0.5, 0.5],
        TargetSchedule::Sinusoid { base: vec![1.0, 0.5], amplitude: vec![0.3, 0.2], period: 2.0 },
    )
    .unwrap();
    let model = LinearFlowModel::random(6, 2, 0.5, 1.0, 0).unwrap();
    let opts = FlowOptions { horizon: 2.0, dt: 0.05, ..FlowOptions::default() };
    c.bench_function("linear_flow_t6_h2", |b| b.iter(|| integrate_flow(&model, &process, &opts, false, false).unwrap()));
}

criterion_group!(benches, euler, losses, probes, linear_flow);
criterion_main!(benches);
