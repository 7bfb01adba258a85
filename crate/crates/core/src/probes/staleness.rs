use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::NetParams;
use crate::envlab::{argmax, Mdp};
use crate::error::{ensure, Error, Result};
use crate::flowcritic::{FlowCritic, NetField, VelocityField};
use crate::monocritic::mono_q;

/// Greedy-policy rollouts used to score a critic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub episodes: usize,
    pub horizon: usize,
    /// Integrations averaged per action value (flow critics only).
    pub n_eval: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { episodes: 20, horizon: 50, n_eval: 4, gamma: 0.9, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Fraction of episodes reaching a terminal state within the horizon.
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Rolls out the greedy policy of `q` from the start state. `q` receives the
/// features of `(s, a)` and the shared evaluation RNG.
pub fn greedy_rollouts(
    mdp: &Mdp,
    spec: &EvalSpec,
    mut q: impl FnMut(&[f64], &mut ChaCha8Rng) -> Result<f64>,
) -> Result<EvalResult> {
    ensure(spec.episodes >= 1 && spec.horizon >= 1, || "need at least one episode and one step".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let features: Vec<Vec<f64>> =
        (0..mdp.n_states()).flat_map(|s| (0..mdp.n_actions()).map(move |a| (s, a))).map(|(s, a)| mdp.features(s, a)).collect();
    let mut qs = vec![0.0; mdp.n_actions()];
    let (mut successes, mut total) = (0usize, 0.0);
    for _ in 0..spec.episodes {
        let mut s = mdp.start_state();
        let mut discount = 1.0;
        for _ in 0..spec.horizon {
            if mdp.is_terminal(s) {
                break;
            }
            for (a, v) in qs.iter_mut().enumerate() {
                *v = q(&features[s * mdp.n_actions() + a], &mut rng)?;
            }
            let a = argmax(&qs);
            total += discount * mdp.sample_reward(s, a, &mut rng);
            discount *= spec.gamma;
            s = mdp.sample_next(s, a, &mut rng);
        }
        if mdp.is_terminal(s) {
            successes += 1;
        }
    }
    let n = spec.episodes as f64;
    Ok(EvalResult { success_rate: successes as f64 / n, mean_return: total / n })
}

/// Number of leading integration steps evaluated with the stale snapshot.
pub fn stale_steps(kappa_pct: u32, steps: usize) -> usize {
    (kappa_pct as usize * steps).div_ceil(100)
}

fn check_pct(pct: u32) -> Result<()> {
    ensure(pct <= 100, || format!("percentage {pct} exceeds 100"))
}

/// Mean over `n` integrations whose first `n_stale` steps use `stale`.
fn spliced_flow_value<R: Rng + ?Sized>(
    current: &mut NetField<'_>,
    stale: &mut NetField<'_>,
    n_stale: usize,
    critic: &FlowCritic,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let cfg = &critic.config;
    let k = cfg.integration_steps;
    let eta = 1.0 / k as f64;
    let mut acc = 0.0;
    for _ in 0..n {
        let mut z = rng.gen_range(cfg.noise_low..cfg.noise_high);
        for step in 0..k {
            let t = step as f64 * eta;
            let v = if step < n_stale { stale.velocity(z, t) } else { current.velocity(z, t) };
            z += eta * v;
        }
        acc += z;
    }
    let q = acc / n as f64;
    if !q.is_finite() {
        return Err(Error::NonFinite(format!("integrated value {q}")));
    }
    Ok(q)
}

/// Greedy-policy score with the first `ceil(kappa K / 100)` integration steps
/// evaluated by the stale snapshot.
pub fn staleness_probe(
    mdp: &Mdp,
    critic: &FlowCritic,
    current: &NetParams,
    stale: &NetParams,
    kappa_pct: u32,
    spec: &EvalSpec,
) -> Result<EvalResult> {
    check_pct(kappa_pct)?;
    if !current.same_topology(stale) {
        return Err(Error::TopologyMismatch("stale snapshot differs from the current network".into()));
    }
    let n_stale = stale_steps(kappa_pct, critic.config.integration_steps);
    let dim = mdp.feature_dim();
    let mode = critic.output_mode();
    let mut cur = NetField::new(current, &vec![0.0; dim], mode)?;
    let mut old = NetField::new(stale, &vec![0.0; dim], mode)?;
    greedy_rollouts(mdp, spec, |x, rng| {
        cur.set_features(x);
        old.set_features(x);
        spliced_flow_value(&mut cur, &mut old, n_stale, critic, spec.n_eval, rng)
    })
}

/// Greedy-policy score of a single flow snapshot.
pub fn evaluate_flow_policy(mdp: &Mdp, critic: &FlowCritic, params: &NetParams, spec: &EvalSpec) -> Result<EvalResult> {
    staleness_probe(mdp, critic, params, params, 0, spec)
}

/// `current` with its first `n_layers` layers replaced by `stale`'s.
pub fn splice_stale_layers(current: &NetParams, stale: &NetParams, n_layers: usize) -> Result<NetParams> {
    if !current.same_topology(stale) {
        return Err(Error::TopologyMismatch("stale snapshot differs from the current network".into()));
    }
    ensure(n_layers <= current.n_layers(), || format!("cannot splice {n_layers} layers"))?;
    let mut out = current.clone();
    if n_layers > 0 {
        let end = current.layer_range(n_layers - 1).end;
        out.flat_mut()[..end].copy_from_slice(&stale.flat()[..end]);
    }
    Ok(out)
}

/// Monolithic analog: the first `ceil(pct L / 100)` of the `L` layers (head included)
/// use stale weights.
pub fn mono_staleness_analog(
    mdp: &Mdp,
    current: &NetParams,
    stale: &NetParams,
    layers_pct: u32,
    spec: &EvalSpec,
) -> Result<EvalResult> {
    check_pct(layers_pct)?;
    let n = stale_steps(layers_pct, current.n_layers());
    let spliced = splice_stale_layers(current, stale, n)?;
    evaluate_mono_policy(mdp, &spliced, spec)
}

pub fn evaluate_mono_policy(mdp: &Mdp, params: &NetParams, spec: &EvalSpec) -> Result<EvalResult> {
    greedy_rollouts(mdp, spec, |x, _| mono_q(params, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::NetConfig;
    use crate::envlab::build_chain;
    use crate::flowcritic::FlowCriticConfig;

    #[test]
    fn stale_step_counts() {
        assert_eq!(stale_steps(0, 8), 0);
        assert_eq!(stale_steps(25, 8), 2);
        assert_eq!(stale_steps(30, 8), 3);
        assert_eq!(stale_steps(100, 8), 8);
        assert_eq!(stale_steps(1, 8), 1);
    }

    #[test]
    fn splice_by_hand() {
        let cfg = NetConfig { width: 4, depth: 2, ..NetConfig::new(3, 1) };
        let (a, b) = (cfg.build(1).unwrap(), cfg.build(2).unwrap());
        let s = splice_stale_layers(&a, &b, 2).unwrap();
        let mut layers = a.layers();
        let stale = b.layers();
        layers[0] = stale[0].clone();
        layers[1] = stale[1].clone();
        assert_eq!(s, NetParams::from_layers(layers).unwrap());
        assert_eq!(splice_stale_layers(&a, &b, 0).unwrap(), a);
        assert_eq!(splice_stale_layers(&a, &b, 3).unwrap(), b);
    }

    #[test]
    fn edge_percentages() {
        let mdp = build_chain(4, 0.1, 1.0).unwrap();
        let critic = FlowCritic::new(FlowCriticConfig::for_reward_range(0.0, 1.0, 0.9)).with_net(NetConfig {
            width: 8,
            depth: 2,
            ..NetConfig::new(0, 1)
        });
        let cfg = critic.net_config(mdp.feature_dim());
        let mut a = cfg.build(1).unwrap();
        let mut b = cfg.build(2).unwrap();
        // give both a nonzero head so the two snapshots disagree
        let n = a.n_params();
        a.flat_mut()[n - 3] = 0.7;
        b.flat_mut()[n - 2] = -0.4;
        let spec = EvalSpec { episodes: 5, horizon: 10, ..Default::default() };
        assert_eq!(
            staleness_probe(&mdp, &critic, &a, &b, 0, &spec).unwrap(),
            evaluate_flow_policy(&mdp, &critic, &a, &spec).unwrap()
        );
        assert_eq!(
            staleness_probe(&mdp, &critic, &a, &b, 100, &spec).unwrap(),
            evaluate_flow_policy(&mdp, &critic, &b, &spec).unwrap()
        );
        let other = NetConfig { width: 9, ..cfg.clone() }.build(0).unwrap();
        assert!(matches!(staleness_probe(&mdp, &critic, &a, &other, 50, &spec), Err(Error::TopologyMismatch(_))));
        let m = NetConfig { width: 8, depth: 2, ..NetConfig::new(mdp.feature_dim(), 1) };
        let (ma, mb) = (m.build(3).unwrap(), m.build(4).unwrap());
        assert_eq!(mono_staleness_analog(&mdp, &ma, &mb, 0, &spec).unwrap(), evaluate_mono_policy(&mdp, &ma, &spec).unwrap());
        assert_eq!(mono_staleness_analog(&mdp, &ma, &mb, 100, &spec).unwrap(), evaluate_mono_policy(&mdp, &mb, &spec).unwrap());
        assert!(staleness_probe(&mdp, &critic, &a, &b, 101, &spec).is_err());
    }

    #[test]
    fn oracle_like_field_always_succeeds() {
        // one-hot pair features: odd coordinates are "right"
        let mdp = build_chain(5, 0.0, 1.0).unwrap();
        let spec = EvalSpec { episodes: 3, horizon: 10, ..Default::default() };
        let r = greedy_rollouts(&mdp, &spec, |x, _| Ok(x.iter().skip(1).step_by(2).sum())).unwrap();
        assert_eq!(r.success_rate, 1.0);
        assert!((r.mean_return - 0.9f64.powi(3)).abs() < 1e-12);
    }
}
