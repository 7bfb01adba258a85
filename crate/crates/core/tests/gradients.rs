mod common;

use common::{random_batch, random_net};
use flowtd_core::monocritic::mono_td_loss_and_grad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn floq_gradient() {
    common::floq_suite().unwrap();
}

#[test]
fn predict_target_gradient() {
    common::predict_target_suite().unwrap();
}

#[test]
fn distributional_gradient() {
    common::distributional_suite().unwrap();
}

#[test]
fn monolithic_td_gradient() {
    common::mono_suite().unwrap();
}

#[test]
fn checker_flags_a_wrong_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = random_net(&mut rng, 3).build(9).unwrap();
    let batch = random_batch(&mut rng, 3);
    let err = common::max_rel_error(&params, |p| {
        let (l, g) = mono_td_loss_and_grad(p, &batch, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok((l, g.into_iter().map(|x| x * 1.001).collect()))
    });
    assert!(err > 5e-4, "{err}");
}
