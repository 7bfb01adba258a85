use flowtd_core::envlab::{bellman_residual, build_chain, collect_dataset, value_iteration, Dataset, Policy};
use flowtd_core::experiments::{aggregate, ExperimentConfig, ExperimentId, SeedRow};
use flowtd_core::flowcritic::integrate_terminal;
use flowtd_core::lintheory::{beta_coefficients, mean_predictor, unroll_predictor, LinearFlowModel};
use flowtd_core::probes::stale_steps;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_field_lands_on_target(q in -50.0f64..50.0, z0 in -50.0f64..50.0, k in 1usize..=256) {
        let mut field = |z: f64, t: f64| (q - z) / (1.0 - t);
        let out = integrate_terminal(&mut field, z0, k);
        prop_assert!((out - q).abs() <= 1e-10 * (1.0 + q.abs()), "K={k}: {out} vs {q}");
    }

    #[test]
    fn stale_step_counts_are_monotone(k in 1usize..64, a in 0u32..=100, b in 0u32..=100) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(stale_steps(lo, k) <= stale_steps(hi, k));
        prop_assert!(stale_steps(hi, k) <= k);
        prop_assert_eq!(stale_steps(0, k), 0);
        prop_assert_eq!(stale_steps(100, k), k);
        // ceil(pct k / 100) by float arithmetic
        prop_assert_eq!(stale_steps(a, k), (a as f64 * k as f64 / 100.0 - 1e-9).ceil().max(0.0) as usize);
    }

    #[test]
    fn unrolled_predictor_is_affine_in_noise(
        t in 3usize..10, d in 1usize..5, seed in 0u64..1000, z in -3.0f64..3.0, x in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        let model = LinearFlowModel::random(t, d, 1.0, 1.0, seed).unwrap();
        let x = &x[..d];
        let direct = unroll_predictor(&model, x, z);
        let closed = mean_predictor(&model, x) + model.noise_gain() * z;
        prop_assert!((direct - closed).abs() <= 1e-12 * (1.0 + direct.abs()));
        // the unrolled map's slope in z is the gain and its intercept the mean predictor
        let slope = unroll_predictor(&model, x, z + 1.0) - direct;
        prop_assert!((slope - model.noise_gain()).abs() <= 1e-12 * (1.0 + slope.abs()));
        let beta = beta_coefficients(&model);
        prop_assert_eq!(*beta.last().unwrap(), model.h());
    }

    #[test]
    fn aggregates_match_two_pass_statistics(values in prop::collection::vec(-1e3f64..1e3, 1..12), failed in 0usize..3) {
        let mut rows: Vec<SeedRow> = values
            .iter()
            .enumerate()
            .map(|(i, v)| SeedRow { seed: i as u64, metrics: [("m".to_string(), *v)].into(), ..SeedRow::default() })
            .collect();
        for i in 0..failed {
            rows.push(SeedRow {
                seed: 100 + i as u64,
                metrics: [("m".to_string(), 1e9)].into(),
                error: Some("diverged".into()),
                ..SeedRow::default()
            });
        }
        let agg = aggregate(&rows)["m"];
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        prop_assert_eq!(agg.n, values.len());
        prop_assert!((agg.mean - mean).abs() <= 1e-9);
        prop_assert!((agg.std - var.sqrt()).abs() <= 1e-9);
    }

    #[test]
    fn config_hash_tracks_meaningful_fields(extra_seed in 10u64..1000, steps in 1usize..10_000, id in 0usize..13) {
        let base = ExperimentConfig::default_for(ExperimentId::ALL[id]);
        let mut moved = base.clone();
        moved.out_dir = Some("/tmp/elsewhere".into());
        prop_assert_eq!(moved.hash(), base.hash());
        let round = ExperimentConfig::from_json(&base.to_json().unwrap()).unwrap();
        prop_assert_eq!(round.hash(), base.hash());
        let mut seeds = base.clone();
        seeds.seeds.push(extra_seed);
        prop_assert_ne!(seeds.hash(), base.hash());
        let mut sched = base.clone();
        sched.schedule.steps = steps;
        prop_assert_eq!(sched.hash() == base.hash(), steps == base.schedule.steps);
    }

    #[test]
    fn value_iteration_is_a_bellman_fixed_point(n in 2usize..9, slip in 0.0f64..0.4, gamma in 0.1f64..0.95) {
        let mdp = build_chain(n, slip, 1.0).unwrap();
        let q = value_iteration(&mdp, gamma, 1e-12).unwrap();
        prop_assert!(bellman_residual(&mdp, &q, gamma, None) < 1e-9);
    }

    #[test]
    fn dataset_bytes_round_trip(n in 1usize..300, seed in 0u64..500) {
        let mdp = build_chain(5, 0.1, 1.0).unwrap();
        let data = collect_dataset(&mdp, &Policy::uniform(&mdp), n, seed).unwrap();
        let mut bytes = Vec::new();
        data.write_to(&mut bytes).unwrap();
        prop_assert_eq!(Dataset::read_from(&bytes[..]).unwrap(), data.clone());
        prop_assert_eq!(data.len(), n);
        data.validate(&mdp).unwrap();
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ExperimentConfig::smoke(ExperimentId::TdOracle);
    cfg.seeds.clear();
    assert!(cfg.validate().is_err());
    cfg.seeds = vec![3, 3];
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::smoke(ExperimentId::TdOracle);
    cfg.schema_version += 1;
    assert!(cfg.validate().is_err());
    let text = ExperimentConfig::smoke(ExperimentId::TdOracle).to_json().unwrap().replace("td-oracle", "no-such");
    assert!(ExperimentConfig::from_json(&text).is_err());
}
