use criterion::{criterion_group, criterion_main, Criterion};
use flowtd_core::experiments::{run_experiment, ExperimentConfig, ExperimentId};

fn smoke_runs(c: &mut Criterion) {
    let mut group = c.benchmark_group("smoke_experiment");
    group.sample_size(10);
    for id in [ExperimentId::LinearTheory, ExperimentId::ConicAudit, ExperimentId::TdOracle] {
        let cfg = ExperimentConfig::smoke(id);
        group.bench_function(id.as_str(), |b| b.iter(|| run_experiment(&cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, smoke_runs);
criterion_main!(benches);
