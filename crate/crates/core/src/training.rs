//! TD training harness shared by flow-matching and monolithic critics.
//!
//! Both critic families plug into the same loop through [`CriticModel`], so
//! target construction, batching, target-network updates, freezing, target
//! noise and logging are identical across them.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{feature_norms, freeze_mask, sgd_adam_step, AdamHyper, AdamState, ForwardTrace, NetParams, ParamMask};
use crate::envlab::{argmax, mc_returns, Dataset, Mdp, OracleQ, Policy, Transition};
use crate::error::{ensure, Error, Result};
use crate::flowcritic::TargetUpdate;

/// Where regression targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetKind {
    /// Bootstrap with the greedy next action under the target network.
    TdGreedy,
    /// Bootstrap with a next action sampled from the behavior policy.
    TdPolicy,
    /// Bootstrap with the next action recorded in the dataset.
    Sarsa,
    /// Regress to discounted returns-to-go.
    MonteCarlo,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetKind::TdGreedy => "td",
            TargetKind::TdPolicy => "td-policy",
            TargetKind::Sarsa => "sarsa",
            TargetKind::MonteCarlo => "mc",
        })
    }
}

/// Regression target for one transition.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainTarget {
    Value(f64),
    /// Left for the critic to push forward (distributional losses only).
    Bootstrap {
        reward: f64,
        discount: f64,
        next_features: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: Vec<f64>,
    pub target: TrainTarget,
}

/// A critic family that the harness can train.
pub trait CriticModel: Sync {
    /// Architecture tag written to logs and checkpoints.
    fn tag(&self) -> String;
    fn gamma(&self) -> f64;
    fn target_update(&self) -> TargetUpdate;
    /// Samples used for greedy action selection.
    fn n_eval(&self) -> usize;
    fn init_params(&self, feature_dim: usize, seed: u64) -> Result<NetParams>;
    /// Q estimate; flow critics average `n` integrations, monolithic critics ignore `n`.
    fn q_value(&self, params: &NetParams, features: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<f64>;
    /// Estimate of `Q_target(s', a')` used inside TD targets.
    fn target_value(&self, target: &NetParams, features: &[f64], rng: &mut ChaCha8Rng) -> Result<f64>;
    /// Whether bootstrapped samples should be left as [`TrainTarget::Bootstrap`].
    fn pushforward_targets(&self) -> bool {
        false
    }
    fn loss_and_grad(
        &self,
        params: &NetParams,
        target: &NetParams,
        batch: &[TrainSample],
        target_noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<f64>)>;
    /// Forward trace used for feature-norm measurements.
    fn probe_trace(&self, params: &NetParams, features: &[f64]) -> Result<ForwardTrace>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub log_every: usize,
    /// Keep an in-memory parameter snapshot every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Greedy next actions are recomputed this often under Polyak updates
    /// (and on every hard target update).
    pub greedy_refresh_every: usize,
    /// Integrations per (s, a) when measuring the probe set.
    pub eval_samples: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 5_000,
            batch_size: 64,
            adam: AdamHyper { lr: 1e-3, ..AdamHyper::default() },
            log_every: 250,
            checkpoint_every: None,
            greedy_refresh_every: 100,
            eval_samples: 16,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        ensure(self.batch_size >= 1, || "batch size must be >= 1".into())?;
        ensure(self.log_every >= 1, || "log cadence must be >= 1".into())?;
        ensure(self.greedy_refresh_every >= 1, || "greedy refresh cadence must be >= 1".into())?;
        ensure(self.eval_samples >= 1, || "eval samples must be >= 1".into())?;
        ensure(self.checkpoint_every != Some(0), || "checkpoint cadence must be >= 1".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub at_step: usize,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Interventions {
    /// Half-width of uniform noise added to regression targets (velocity targets for flows).
    pub target_noise: f64,
    pub freeze: Option<FreezeSpec>,
}

/// Dataset plus everything derived from it once per run.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub mdp: Mdp,
    pub dataset: Dataset,
    pub target_kind: TargetKind,
    pair_features: Vec<Vec<f64>>,
    next_actions: Vec<Option<usize>>,
    mc: Option<Vec<f64>>,
    probe_pairs: Vec<(usize, usize)>,
}

impl TrainingData {
    pub fn new(mdp: Mdp, dataset: Dataset, target_kind: TargetKind, gamma: f64) -> Result<Self> {
        dataset.validate(&mdp)?;
        let pair_features = (0..mdp.n_states())
            .flat_map(|s| (0..mdp.n_actions()).map(move |a| (s, a)))
            .map(|(s, a)| mdp.features(s, a))
            .collect();
        let mc = match target_kind {
            TargetKind::MonteCarlo => Some(mc_returns(&dataset, gamma)?.returns),
            _ => None,
        };
        let probe_pairs = (0..mdp.n_states())
            .filter(|s| !mdp.is_terminal(*s))
            .flat_map(|s| (0..mdp.n_actions()).map(move |a| (s, a)))
            .collect();
        let next_actions = dataset.next_actions();
        Ok(Self { mdp, dataset, target_kind, pair_features, next_actions, mc, probe_pairs })
    }

    pub fn features(&self, s: usize, a: usize) -> &[f64] {
        &self.pair_features[s * self.mdp.n_actions() + a]
    }

    pub fn probe_pairs(&self) -> &[(usize, usize)] {
        &self.probe_pairs
    }

    pub fn behavior(&self) -> &Policy {
        &self.dataset.provenance
    }

    /// Appends an online transition to the replay data. Monte Carlo targets need
    /// complete episodes and are rejected.
    pub fn push_transition(&mut self, tr: Transition, starts_episode: bool) -> Result<()> {
        ensure(self.mc.is_none(), || "cannot append to Monte Carlo training data".into())?;
        ensure(tr.state < self.mdp.n_states() && tr.next_state < self.mdp.n_states(), || "state out of range".into())?;
        ensure(tr.action < self.mdp.n_actions(), || "action out of range".into())?;
        let n = self.dataset.len();
        if starts_episode || n == 0 {
            self.dataset.episode_starts.push(n);
        } else if !self.dataset.transitions[n - 1].terminal {
            self.next_actions[n - 1] = Some(tr.action);
        }
        self.dataset.transitions.push(tr);
        self.next_actions.push(None);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    PreFreeze,
    PostFreeze,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::PreFreeze => "pre-freeze",
            Phase::PostFreeze => "post-freeze",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub mean_q_probe: f64,
    /// Mean post-layernorm feature norm per layernorm site over the probe set.
    pub feature_norms: Vec<f64>,
    pub target_kind: TargetKind,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub tag: String,
    pub rows: Vec<LogRow>,
    pub checkpoints: Vec<(usize, NetParams)>,
}

impl TrainingLog {
    /// CSV: `step,loss,mean_q_probe,feature_norm_layer_<i>...,target_kind,phase`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n_sites = self.rows.first().map_or(0, |r| r.feature_norms.len());
        write!(w, "step,loss,mean_q_probe")?;
        for i in 0..n_sites {
            write!(w, ",feature_norm_layer_{i}")?;
        }
        writeln!(w, ",target_kind,phase")?;
        for r in &self.rows {
            write!(w, "{},{},{}", r.step, r.loss, r.mean_q_probe)?;
            for n in &r.feature_norms {
                write!(w, ",{n}")?;
            }
            writeln!(w, ",{},{}", r.target_kind, r.phase)?;
        }
        Ok(())
    }
}

/// Mutable state of one training run; can be resumed with different interventions.
#[derive(Debug, Clone)]
pub struct RunState {
    pub params: NetParams,
    pub target: NetParams,
    pub adam: AdamState,
    pub step: usize,
    pub mask: Option<ParamMask>,
    pub phase: Phase,
    pub seed: u64,
    rng: ChaCha8Rng,
    greedy: Vec<usize>,
    greedy_stamp: Option<usize>,
    loss_acc: f64,
    loss_count: usize,
}

impl RunState {
    pub fn new(model: &dyn CriticModel, data: &TrainingData, seed: u64) -> Result<Self> {
        let params = model.init_params(data.mdp.feature_dim(), seed)?;
        Ok(Self {
            target: params.clone(),
            adam: AdamState::new(params.n_params()),
            params,
            step: 0,
            mask: None,
            phase: Phase::PreFreeze,
            seed,
            // offset keeps the training stream distinct from the init stream
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15),
            greedy: vec![0; data.mdp.n_states()],
            greedy_stamp: None,
            loss_acc: 0.0,
            loss_count: 0,
        })
    }

    pub fn freeze(&mut self, layers: &[usize]) -> Result<()> {
        self.mask = Some(freeze_mask(&self.params, layers)?);
        self.phase = Phase::PostFreeze;
        Ok(())
    }
}

/// Divergence cap on |Q|: ten times the largest achievable return.
pub fn divergence_cap(mdp: &Mdp, gamma: f64) -> f64 {
    10.0 * mdp.reward_scale() / (1.0 - gamma)
}

/// Seed for the probe RNG at a given step; independent of the training stream.
pub fn probe_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (step as u64).wrapping_add(0x5851_F42D_4C95_7F2D)
}

/// Mean Q and mean feature norms over the probe set.
pub fn probe_metrics(
    model: &dyn CriticModel,
    params: &NetParams,
    data: &TrainingData,
    eval_samples: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q_sum = 0.0;
    let mut norms: Vec<f64> = Vec::new();
    for &(s, a) in data.probe_pairs() {
        let x = data.features(s, a);
        q_sum += model.q_value(params, x, eval_samples, &mut rng)?;
        let trace = model.probe_trace(params, x)?;
        let n = feature_norms(&trace, params);
        if norms.is_empty() {
            norms = vec![0.0; n.len()];
        }
        for (acc, v) in norms.iter_mut().zip(n) {
            *acc += v;
        }
    }
    let count = data.probe_pairs().len() as f64;
    norms.iter_mut().for_each(|v| *v /= count);
    Ok((q_sum / count, norms))
}

fn refresh_greedy(model: &dyn CriticModel, data: &TrainingData, state: &mut RunState) -> Result<()> {
    let na = data.mdp.n_actions();
    let mut qs = vec![0.0; na];
    for s in 0..data.mdp.n_states() {
        if data.mdp.is_terminal(s) {
            continue;
        }
        for (a, q) in qs.iter_mut().enumerate() {
            *q = model.q_value(&state.target, data.features(s, a), model.n_eval(), &mut state.rng)?;
        }
        state.greedy[s] = argmax(&qs);
    }
    state.greedy_stamp = Some(state.step);
    Ok(())
}

fn build_batch(
    model: &dyn CriticModel,
    data: &TrainingData,
    state: &mut RunState,
    batch_size: usize,
) -> Result<Vec<TrainSample>> {
    let n = data.dataset.len();
    let gamma = model.gamma();
    let na = data.mdp.n_actions();
    // One target estimate per distinct (s', a') per step.
    let mut cache: Vec<Option<f64>> = vec![None; data.mdp.n_pairs()];
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = state.rng.gen_range(0..n);
        let tr = data.dataset.transitions[i];
        let features = data.features(tr.state, tr.action).to_vec();
        if let Some(mc) = &data.mc {
            batch.push(TrainSample { features, target: TrainTarget::Value(mc[i]) });
            continue;
        }
        if tr.terminal {
            batch.push(TrainSample { features, target: TrainTarget::Value(tr.reward) });
            continue;
        }
        let next_action = match data.target_kind {
            TargetKind::TdGreedy => state.greedy[tr.next_state],
            TargetKind::TdPolicy => data.behavior().sample(tr.next_state, &mut state.rng),
            TargetKind::Sarsa => match data.next_actions[i] {
                Some(a) => a,
                // truncated episode: fall back to the behavior policy
                None => data.behavior().sample(tr.next_state, &mut state.rng),
            },
            TargetKind::MonteCarlo => unreachable!(),
        };
        let next_features = data.features(tr.next_state, next_action);
        if model.pushforward_targets() {
            batch.push(TrainSample {
                features,
                target: TrainTarget::Bootstrap { reward: tr.reward, discount: gamma, next_features: next_features.to_vec() },
            });
            continue;
        }
        let pair = tr.next_state * na + next_action;
        let next_q = match cache[pair] {
            Some(v) => v,
            None => {
                let v = model.target_value(&state.target, next_features, &mut state.rng)?;
                cache[pair] = Some(v);
                v
            }
        };
        batch.push(TrainSample { features, target: TrainTarget::Value(tr.reward + gamma * next_q) });
    }
    Ok(batch)
}

fn update_target(model: &dyn CriticModel, state: &mut RunState) -> bool {
    match model.target_update() {
        TargetUpdate::Hard { every } => {
            if state.step.is_multiple_of(every) {
                state.target = state.params.clone();
                return true;
            }
            false
        }
        TargetUpdate::Polyak { tau } => {
            for (t, p) in state.target.flat_mut().iter_mut().zip(state.params.flat()) {
                *t = tau * p + (1.0 - tau) * *t;
            }
            false
        }
    }
}

/// Advances `state` to `until_step`, appending to `log`.
pub fn train_until(
    model: &dyn CriticModel,
    data: &TrainingData,
    schedule: &Schedule,
    interventions: &Interventions,
    state: &mut RunState,
    until_step: usize,
    log: &mut TrainingLog,
) -> Result<()> {
    schedule.validate()?;
    ensure(interventions.target_noise >= 0.0, || "target noise must be >= 0".into())?;
    let cap = divergence_cap(&data.mdp, model.gamma());
    if log.tag.is_empty() {
        log.tag = model.tag();
    }
    while state.step < until_step {
        if let Some(f) = &interventions.freeze {
            if state.step == f.at_step && state.phase == Phase::PreFreeze {
                state.freeze(&f.layers)?;
            }
        }
        if data.target_kind == TargetKind::TdGreedy {
            let stale = match (state.greedy_stamp, model.target_update()) {
                (None, _) => true,
                (Some(_), TargetUpdate::Hard { .. }) => false,
                (Some(t), TargetUpdate::Polyak { .. }) => state.step - t >= schedule.greedy_refresh_every,
            };
            if stale {
                refresh_greedy(model, data, state)?;
            }
        }
        let batch = build_batch(model, data, state, schedule.batch_size)?;
        let (loss, grad) = model
            .loss_and_grad(&state.params, &state.target, &batch, interventions.target_noise, &mut state.rng)
            .map_err(|e| Error::Diverged { step: state.step, reason: e.to_string() })?;
        sgd_adam_step(&mut state.params, &grad, &mut state.adam, &schedule.adam, state.mask.as_ref())
            .map_err(|e| Error::Diverged { step: state.step, reason: e.to_string() })?;
        state.step += 1;
        state.loss_acc += loss;
        state.loss_count += 1;
        if update_target(model, state) && data.target_kind == TargetKind::TdGreedy {
            refresh_greedy(model, data, state)?;
        }
        if state.step.is_multiple_of(schedule.log_every) || state.step == until_step {
            let (mean_q, norms) =
                probe_metrics(model, &state.params, data, schedule.eval_samples, probe_seed(state.seed, state.step))
                    .map_err(|e| Error::Diverged { step: state.step, reason: e.to_string() })?;
            if mean_q.is_nan() || mean_q.abs() > cap {
                return Err(Error::Diverged {
                    step: state.step,
                    reason: format!("|mean Q| = {} exceeds cap {cap}", mean_q.abs()),
                });
            }
            log.rows.push(LogRow {
                step: state.step,
                loss: state.loss_acc / state.loss_count as f64,
                mean_q_probe: mean_q,
                feature_norms: norms,
                target_kind: data.target_kind,
                phase: state.phase,
            });
            state.loss_acc = 0.0;
            state.loss_count = 0;
        }
        if schedule.checkpoint_every.is_some_and(|c| state.step.is_multiple_of(c)) {
            log.checkpoints.push((state.step, state.params.clone()));
        }
    }
    Ok(())
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: RunState,
    pub log: TrainingLog,
}

pub fn train(
    model: &dyn CriticModel,
    data: &TrainingData,
    schedule: &Schedule,
    interventions: &Interventions,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut state = RunState::new(model, data, seed)?;
    let mut log = TrainingLog::default();
    train_until(model, data, schedule, interventions, &mut state, schedule.steps, &mut log)?;
    Ok(TrainOutcome { state, log })
}

/// Q estimates for every (s, a), row-major.
pub fn q_table(model: &dyn CriticModel, params: &NetParams, mdp: &Mdp, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(mdp.n_pairs());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            out.push(if mdp.is_terminal(s) { 0.0 } else { model.q_value(params, &mdp.features(s, a), n, &mut rng)? });
        }
    }
    Ok(out)
}

/// Sup-norm error against an oracle over non-terminal states.
pub fn oracle_error(
    model: &dyn CriticModel,
    params: &NetParams,
    mdp: &Mdp,
    oracle: &OracleQ,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let q = q_table(model, params, mdp, n, seed)?;
    Ok(oracle.sup_error(mdp, |s, a| q[s * mdp.n_actions() + a]))
}
