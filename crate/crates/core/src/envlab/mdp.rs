use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// How (s, a) pairs are presented to a critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// Indicator over the `n_states * n_actions` pairs.
    OneHot,
    /// Fixed Gaussian projection of the one-hot code, scaled by `1/sqrt(dim)`.
    RandomProjection { dim: usize, seed: u64, matrix: Vec<f64> },
}

impl FeatureMap {
    pub fn random_projection(n_pairs: usize, dim: usize, seed: u64) -> Result<Self> {
        ensure(dim >= 1, || "projection dimension must be positive".into())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let matrix = (0..n_pairs * dim)
            .map(|_| {
                // Box-Muller keeps this free of a distributions dependency.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        Ok(FeatureMap::RandomProjection { dim, seed, matrix })
    }
}

/// Realized-reward model. The mean reward is always `r(s, a)`, so oracles are unaffected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RewardNoise {
    None,
    /// Reward `r / p` with probability `p`, else 0.
    Bernoulli {
        p: f64,
    },
}

/// Finite MDP with tabular dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[s][a][s']`.
    transition: Vec<f64>,
    /// Row-major `[s][a]`, expected reward.
    reward: Vec<f64>,
    terminal: Vec<bool>,
    start_state: usize,
    feature_map: FeatureMap,
    reward_noise: RewardNoise,
}

impl Mdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        terminal: Vec<bool>,
        start_state: usize,
    ) -> Result<Self> {
        ensure(n_states >= 1 && n_actions >= 1, || "MDP needs at least one state and one action".into())?;
        ensure(transition.len() == n_states * n_actions * n_states, || {
            format!("transition table has {} entries, expected {}", transition.len(), n_states * n_actions * n_states)
        })?;
        ensure(reward.len() == n_states * n_actions, || "reward table has wrong size".into())?;
        ensure(terminal.len() == n_states, || "terminal mask has wrong size".into())?;
        ensure(start_state < n_states, || "start state out of range".into())?;
        ensure(!terminal[start_state], || "start state is terminal".into())?;
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(invalid(format!("row ({s},{a}) has a negative or non-finite probability")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(invalid(format!("row ({s},{a}) sums to {sum}")));
                }
                let r = reward[s * n_actions + a];
                if !r.is_finite() {
                    return Err(invalid(format!("reward ({s},{a}) is not finite")));
                }
                if terminal[s] && (row[s] != 1.0 || r != 0.0) {
                    return Err(invalid(format!("terminal state {s} must self-loop with zero reward")));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            terminal,
            start_state,
            feature_map: FeatureMap::OneHot,
            reward_noise: RewardNoise::None,
        })
    }

    pub fn with_feature_map(mut self, feature_map: FeatureMap) -> Result<Self> {
        if let FeatureMap::RandomProjection { dim, matrix, .. } = &feature_map {
            ensure(matrix.len() == dim * self.n_pairs(), || "projection matrix has wrong size".into())?;
        }
        self.feature_map = feature_map;
        Ok(self)
    }

    pub fn with_reward_noise(mut self, noise: RewardNoise) -> Result<Self> {
        if let RewardNoise::Bernoulli { p } = noise {
            ensure(p > 0.0 && p <= 1.0, || format!("Bernoulli reward probability {p} not in (0, 1]"))?;
        }
        self.reward_noise = noise;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn start_state(&self) -> usize {
        self.start_state
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn reward_noise(&self) -> RewardNoise {
        self.reward_noise
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    /// `P(. | s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition_row(s, a)[next]
    }

    pub fn feature_dim(&self) -> usize {
        match &self.feature_map {
            FeatureMap::OneHot => self.n_pairs(),
            FeatureMap::RandomProjection { dim, .. } => *dim,
        }
    }

    pub fn features(&self, s: usize, a: usize) -> Vec<f64> {
        let pair = s * self.n_actions + a;
        match &self.feature_map {
            FeatureMap::OneHot => {
                let mut x = vec![0.0; self.n_pairs()];
                x[pair] = 1.0;
                x
            }
            FeatureMap::RandomProjection { dim, matrix, .. } => matrix[pair * dim..][..*dim].to_vec(),
        }
    }

    /// Largest absolute expected reward, floored at 1e-12.
    pub fn reward_scale(&self) -> f64 {
        self.reward.iter().fold(1e-12_f64, |m, r| m.max(r.abs()))
    }

    pub(crate) fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.transition_row(s, a), rng)
    }

    pub(crate) fn sample_reward<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> f64 {
        let r = self.reward(s, a);
        match self.reward_noise {
            RewardNoise::None => r,
            RewardNoise::Bernoulli { p } => {
                if rng.gen::<f64>() < p {
                    r / p
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding in the cumulative sum: fall back to the last supported entry.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Left/right chain. The rightmost state is terminal; entering it pays `goal_reward`.
/// With probability `slip` the agent moves opposite to the chosen direction.
/// Moving left from state 0 stays put.
pub fn build_chain(n_states: usize, slip: f64, goal_reward: f64) -> Result<Mdp> {
    ensure(n_states >= 2, || format!("chain needs at least 2 states, got {n_states}"))?;
    ensure((0.0..0.5).contains(&slip), || format!("slip {slip} not in [0, 0.5)"))?;
    ensure(goal_reward.is_finite(), || "goal reward must be finite".into())?;
    let goal = n_states - 1;
    let n_actions = 2;
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions];
    let mut terminal = vec![false; n_states];
    terminal[goal] = true;
    for s in 0..n_states {
        for a in [LEFT, RIGHT] {
            let row = &mut transition[(s * n_actions + a) * n_states..][..n_states];
            if s == goal {
                row[goal] = 1.0;
                continue;
            }
            let left = s.saturating_sub(1);
            let right = s + 1;
            let (intended, opposite) = if a == RIGHT { (right, left) } else { (left, right) };
            row[intended] += 1.0 - slip;
            row[opposite] += slip;
            reward[s * n_actions + a] = goal_reward * row[goal];
        }
    }
    Mdp::new(n_states, n_actions, transition, reward, terminal, 0)
}

/// Action-distribution table `pi(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub name: String,
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(name: impl Into<String>, n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        ensure(probs.len() == n_states * n_actions, || "policy table has wrong size".into())?;
        for s in 0..n_states {
            let row = &probs[s * n_actions..][..n_actions];
            ensure(row.iter().all(|p| p.is_finite() && *p >= 0.0), || format!("policy row {s} invalid"))?;
            let sum: f64 = row.iter().sum();
            ensure((sum - 1.0).abs() <= ROW_SUM_TOL, || format!("policy row {s} sums to {sum}"))?;
        }
        Ok(Self { name: name.into(), n_states, n_actions, probs })
    }

    pub fn uniform(mdp: &Mdp) -> Self {
        let n = mdp.n_actions();
        Self { name: "uniform".into(), n_states: mdp.n_states(), n_actions: n, probs: vec![1.0 / n as f64; mdp.n_pairs()] }
    }

    pub fn deterministic(mdp: &Mdp, actions: &[usize]) -> Result<Self> {
        ensure(actions.len() == mdp.n_states(), || "one action per state required".into())?;
        let mut probs = vec![0.0; mdp.n_pairs()];
        for (s, &a) in actions.iter().enumerate() {
            ensure(a < mdp.n_actions(), || format!("action {a} out of range"))?;
            probs[s * mdp.n_actions() + a] = 1.0;
        }
        Self::new("deterministic", mdp.n_states(), mdp.n_actions(), probs)
    }

    /// Takes `preferred` with probability `1 - eps`, otherwise uniform.
    pub fn epsilon_soft(mdp: &Mdp, preferred: &[usize], eps: f64) -> Result<Self> {
        ensure((0.0..=1.0).contains(&eps), || format!("epsilon {eps} not in [0, 1]"))?;
        ensure(preferred.len() == mdp.n_states(), || "one action per state required".into())?;
        let n = mdp.n_actions();
        let mut probs = vec![eps / n as f64; mdp.n_pairs()];
        for (s, &a) in preferred.iter().enumerate() {
            ensure(a < n, || format!("action {a} out of range"))?;
            probs[s * n + a] += 1.0 - eps;
        }
        Self::new(format!("epsilon-soft({eps})"), mdp.n_states(), n, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..][..self.n_actions]
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.probs(s), rng)
    }

    pub(crate) fn check_matches(&self, mdp: &Mdp) -> Result<()> {
        ensure(self.n_states == mdp.n_states() && self.n_actions == mdp.n_actions(), || "policy shape does not match MDP".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_chain_reaches_goal() {
        let mdp = build_chain(2, 0.0, 1.0).unwrap();
        assert_eq!(mdp.prob(0, RIGHT, 1), 1.0);
        assert_eq!(mdp.reward(0, RIGHT), 1.0);
        assert!(mdp.is_terminal(1));
    }

    #[test]
    fn deterministic_chain_is_a_shift() {
        let mdp = build_chain(5, 0.0, 1.0).unwrap();
        for s in 0..4 {
            assert_eq!(mdp.prob(s, RIGHT, s + 1), 1.0);
            assert_eq!(mdp.prob(s, LEFT, s.saturating_sub(1)), 1.0);
        }
        assert_eq!(mdp.prob(4, LEFT, 4), 1.0);
    }

    #[test]
    fn slip_row() {
        let mdp = build_chain(5, 0.1, 1.0).unwrap();
        let row = mdp.transition_row(2, RIGHT);
        assert!((row[3] - 0.9).abs() < 1e-15);
        assert!((row[1] - 0.1).abs() < 1e-15);
        assert_eq!(row.iter().filter(|p| **p > 0.0).count(), 2);
    }

    #[test]
    fn chain_rejects_bad_input() {
        assert!(build_chain(1, 0.0, 1.0).is_err());
        assert!(build_chain(5, 0.5, 1.0).is_err());
        assert!(build_chain(5, -0.1, 1.0).is_err());
        assert!(build_chain(5, 0.1, f64::NAN).is_err());
    }

    #[test]
    fn rows_sum_to_one() {
        for n in 2..10 {
            for slip in [0.0, 0.1, 0.3, 0.49] {
                let mdp = build_chain(n, slip, 2.5).unwrap();
                for s in 0..n {
                    for a in 0..2 {
                        let sum: f64 = mdp.transition_row(s, a).iter().sum();
                        assert!((sum - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn terminal_must_self_loop() {
        // state 1 terminal but leaks to 0
        let err = Mdp::new(2, 1, vec![0.0, 1.0, 0.5, 0.5], vec![0.0, 0.0], vec![false, true], 0);
        assert!(err.is_err());
    }

    #[test]
    fn one_hot_and_projection_features() {
        let mdp = build_chain(3, 0.0, 1.0).unwrap();
        let x = mdp.features(1, RIGHT);
        assert_eq!(x.iter().sum::<f64>(), 1.0);
        assert_eq!(x[3], 1.0);
        let fm = FeatureMap::random_projection(mdp.n_pairs(), 4, 7).unwrap();
        let mdp = mdp.with_feature_map(fm.clone()).unwrap();
        assert_eq!(mdp.feature_dim(), 4);
        assert_eq!(FeatureMap::random_projection(6, 4, 7).unwrap(), fm);
    }
}
