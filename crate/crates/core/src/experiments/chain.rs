use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, CriticKind, CriticSpec, EnvSpec, ExperimentConfig, ScheduleSpec};
use crate::diffnet::{AdamHyper, Architecture, NetConfig, NetParams};
use crate::envlab::{
    argmax, build_chain, collect_dataset, mc_returns, value_iteration, Dataset, Mdp, OracleQ, Policy, RewardNoise, Transition,
    EPISODE_CAP,
};
use crate::error::{ensure, Result};
use crate::flowcritic::{single_step_flow_ablation, FlowCritic, FlowCriticConfig, TargetUpdate};
use crate::monocritic::MonoCritic;
use crate::probes::{greedy_rollouts, EvalResult, EvalSpec};
use crate::training::{
    oracle_error, probe_seed, train_until, CriticModel, Interventions, RunState, Schedule, TargetKind, TrainingData, TrainingLog,
};

/// Chain MDP, its oracle and an offline dataset from the uniform policy.
pub struct ChainSetup {
    pub mdp: Mdp,
    pub oracle: OracleQ,
    pub dataset: Dataset,
    /// Smallest and largest discounted return-to-go in the dataset.
    pub return_range: (f64, f64),
    /// Spread of the oracle Q-values over non-terminal pairs.
    pub q_range: f64,
    pub gamma: f64,
}

impl ChainSetup {
    pub fn new(env: &EnvSpec) -> Result<Self> {
        let mut mdp = build_chain(env.n_states, env.slip, env.goal_reward)?;
        if let Some(p) = env.bernoulli_reward {
            mdp = mdp.with_reward_noise(RewardNoise::Bernoulli { p })?;
        }
        let oracle = value_iteration(&mdp, env.gamma, 1e-12)?;
        let dataset = collect_dataset(&mdp, &Policy::uniform(&mdp), env.dataset_size, env.dataset_seed)?;
        let returns = mc_returns(&dataset, env.gamma)?.returns;
        let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (qlo, qhi) = oracle.range(&mdp);
        Ok(Self { mdp, oracle, dataset, return_range: (lo, hi), q_range: qhi - qlo, gamma: env.gamma })
    }

    pub fn training_data(&self, kind: TargetKind) -> Result<TrainingData> {
        TrainingData::new(self.mdp.clone(), self.dataset.clone(), kind, self.gamma)
    }

    /// Hash of everything the training pipeline reads besides the critic.
    pub fn data_hash(&self) -> Result<String> {
        let mut bytes = Vec::new();
        self.dataset.write_to(&mut bytes)?;
        let mut h = Sha256::new();
        h.update(&bytes);
        h.update(serde_json::to_vec(self.oracle.table())?);
        h.update(self.gamma.to_le_bytes());
        Ok(hex(&h.finalize()))
    }

    pub fn eval_spec(&self, cfg: &ExperimentConfig, seed: u64) -> EvalSpec {
        EvalSpec {
            episodes: cfg.params.eval_episodes,
            horizon: cfg.params.eval_horizon,
            n_eval: 4,
            gamma: self.gamma,
            seed: probe_seed(seed, usize::MAX),
        }
    }
}

/// A concrete critic; probes that need the flow structure match on it.
pub enum Critic {
    Flow(FlowCritic),
    Mono(MonoCritic),
}

impl Critic {
    pub fn build(spec: &CriticSpec, setup: &ChainSetup) -> Self {
        let net = NetConfig {
            width: spec.width,
            depth: spec.depth,
            architecture: if spec.kind == CriticKind::Resnet { Architecture::ResNet } else { Architecture::Mlp },
            ..NetConfig::new(0, 1)
        };
        let update = TargetUpdate::Hard { every: spec.target_update_every };
        match spec.kind {
            CriticKind::Flow => {
                let (lo, hi) = setup.return_range;
                let mut cfg = FlowCriticConfig {
                    integration_steps: spec.integration_steps,
                    noise_low: lo - spec.noise_margin,
                    noise_high: hi + spec.noise_margin,
                    target_samples: spec.target_samples,
                    n_eval: spec.n_eval,
                    target_update: update,
                    loss: spec.loss,
                    ..FlowCriticConfig::for_reward_range(0.0, 1.0, setup.gamma)
                };
                if spec.single_step {
                    cfg = single_step_flow_ablation(&cfg);
                }
                Critic::Flow(FlowCritic::new(cfg).with_net(net))
            }
            CriticKind::Mono | CriticKind::Resnet => {
                let mut m = MonoCritic::new(setup.gamma).with_net(net);
                m.target_update = update;
                Critic::Mono(m)
            }
        }
    }

    pub fn model(&self) -> &dyn CriticModel {
        match self {
            Critic::Flow(f) => f,
            Critic::Mono(m) => m,
        }
    }
}

pub fn schedule(spec: &ScheduleSpec) -> Schedule {
    Schedule {
        steps: spec.steps,
        batch_size: spec.batch_size,
        adam: AdamHyper { lr: spec.lr, ..AdamHyper::default() },
        log_every: spec.log_every,
        ..Schedule::default()
    }
}

/// Training run scored against the oracle at a fixed cadence.
pub struct TrackedRun {
    pub state: RunState,
    pub log: TrainingLog,
    /// `(step, sup error)` pairs.
    pub curve: Vec<(usize, f64)>,
    /// First evaluation step with error below the early-stop threshold.
    pub reached_at: Option<usize>,
}

impl TrackedRun {
    pub fn final_error(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.1)
    }
}

pub fn oracle_score(
    model: &dyn CriticModel,
    params: &NetParams,
    setup: &ChainSetup,
    n: usize,
    seed: u64,
    step: usize,
) -> Result<f64> {
    oracle_error(model, params, &setup.mdp, &setup.oracle, n, probe_seed(seed, step))
}

/// Continues `state` to `until`, scoring every `eval_every` steps; stops early once
/// the error falls below `early_stop`.
#[allow(clippy::too_many_arguments)]
pub fn train_tracked(
    model: &dyn CriticModel,
    setup: &ChainSetup,
    data: &TrainingData,
    schedule: &Schedule,
    interventions: &Interventions,
    run: &mut TrackedRun,
    until: usize,
    eval_every: usize,
    early_stop: Option<f64>,
    eval_integrations: usize,
) -> Result<()> {
    while run.state.step < until {
        let next = (run.state.step + eval_every).min(until);
        train_until(model, data, schedule, interventions, &mut run.state, next, &mut run.log)?;
        let err = oracle_score(model, &run.state.params, setup, eval_integrations, run.state.seed, run.state.step)?;
        run.curve.push((run.state.step, err));
        if let Some(thr) = early_stop {
            if err < thr {
                run.reached_at.get_or_insert(run.state.step);
                break;
            }
        }
    }
    Ok(())
}

pub fn start_run(model: &dyn CriticModel, data: &TrainingData, seed: u64) -> Result<TrackedRun> {
    Ok(TrackedRun { state: RunState::new(model, data, seed)?, log: TrainingLog::default(), curve: Vec::new(), reached_at: None })
}

pub fn evaluate_policy(model: &dyn CriticModel, params: &NetParams, setup: &ChainSetup, spec: &EvalSpec) -> Result<EvalResult> {
    greedy_rollouts(&setup.mdp, spec, |x, rng| model.q_value(params, x, spec.n_eval, rng))
}

/// Mean over dataset pairs of the Q estimate and of its variance across single noise draws.
pub fn dataset_q_stats(
    model: &dyn CriticModel,
    params: &NetParams,
    setup: &ChainSetup,
    draws: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in &setup.dataset.transitions {
        *counts.entry((t.state, t.action)).or_default() += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = setup.dataset.len() as f64;
    let (mut mean_q, mut mean_var, mut oracle_mean) = (0.0, 0.0, 0.0);
    for ((s, a), n) in counts {
        let x = setup.mdp.features(s, a);
        let samples = (0..draws).map(|_| model.q_value(params, &x, 1, &mut rng)).collect::<Result<Vec<f64>>>()?;
        let m = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|q| (q - m).powi(2)).sum::<f64>() / (draws.max(2) - 1) as f64;
        let w = n as f64 / total;
        mean_q += w * m;
        mean_var += w * var;
        oracle_mean += w * setup.oracle.q(s, a);
    }
    Ok((mean_q, mean_var, oracle_mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtdPoint {
    pub env_step: usize,
    pub updates: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Online fine-tuning: the replay buffer starts as `offline`; each environment step
/// takes an epsilon-greedy action, appends the transition and runs `utd` gradient
/// updates. The policy is evaluated every `curve_every` environment steps.
#[allow(clippy::too_many_arguments)]
pub fn utd_loop(
    model: &dyn CriticModel,
    mdp: &Mdp,
    offline: Dataset,
    gamma: f64,
    utd: usize,
    env_steps: usize,
    epsilon: f64,
    schedule: &Schedule,
    eval: &EvalSpec,
    curve_every: usize,
    seed: u64,
) -> Result<Vec<UtdPoint>> {
    ensure(utd >= 1, || "UTD ratio must be >= 1".into())?;
    ensure(curve_every >= 1, || "curve cadence must be >= 1".into())?;
    ensure((0.0..=1.0).contains(&epsilon), || "epsilon must be in [0, 1]".into())?;
    let mut data = TrainingData::new(mdp.clone(), offline, TargetKind::TdGreedy, gamma)?;
    let mut state = RunState::new(model, &data, seed)?;
    let mut log = TrainingLog::default();
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
    let mut curve = Vec::new();
    let mut record = |step: usize, updates: usize, params: &NetParams| -> Result<()> {
        let r = greedy_rollouts(mdp, eval, |x, rng| model.q_value(params, x, eval.n_eval, rng))?;
        curve.push(UtdPoint { env_step: step, updates, success_rate: r.success_rate, mean_return: r.mean_return });
        Ok(())
    };
    record(0, 0, &state.params)?;
    let mut s = mdp.start_state();
    let (mut ep_len, mut new_episode) = (0, true);
    let mut qs = vec![0.0; mdp.n_actions()];
    for step in 1..=env_steps {
        let a = if env_rng.gen::<f64>() < epsilon {
            env_rng.gen_range(0..mdp.n_actions())
        } else {
            for (a, q) in qs.iter_mut().enumerate() {
                *q = model.q_value(&state.params, &mdp.features(s, a), model.n_eval(), &mut env_rng)?;
            }
            argmax(&qs)
        };
        let next = mdp.sample_next(s, a, &mut env_rng);
        let reward = mdp.sample_reward(s, a, &mut env_rng);
        let terminal = mdp.is_terminal(next);
        data.push_transition(Transition { state: s, action: a, reward, next_state: next, terminal }, new_episode)?;
        ep_len += 1;
        new_episode = terminal || ep_len == EPISODE_CAP;
        if new_episode {
            s = mdp.start_state();
            ep_len = 0;
        } else {
            s = next;
        }
        let until = state.step + utd;
        train_until(model, &data, schedule, &Interventions::default(), &mut state, until, &mut log)?;
        if step % curve_every == 0 || step == env_steps {
            record(step, state.step, &state.params)?;
        }
    }
    Ok(curve)
}

/// First environment step whose success reaches `fraction` of `best`; `cap` if never.
pub fn steps_to_fraction(curve: &[UtdPoint], best: f64, fraction: f64, cap: usize) -> usize {
    let thr = fraction * best;
    curve.iter().find(|p| p.success_rate >= thr && p.success_rate > 0.0).map_or(cap, |p| p.env_step)
}
