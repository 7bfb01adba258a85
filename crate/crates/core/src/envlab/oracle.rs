use serde::{Deserialize, Serialize};

use super::mdp::{Mdp, Policy};
use crate::error::{ensure, Error, Result};

const MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    GreedyOptimal,
    FixedPolicyEvaluation,
}

/// Exact (to `tol`) action values for an MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleQ {
    n_actions: usize,
    q: Vec<f64>,
    pub kind: PolicyKind,
}

impl OracleQ {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn table(&self) -> &[f64] {
        &self.q
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn greedy_action(&self, s: usize) -> usize {
        argmax(&self.q[s * self.n_actions..][..self.n_actions])
    }

    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.q.len() / self.n_actions).map(|s| self.greedy_action(s)).collect()
    }

    /// Range of Q over non-terminal states.
    pub fn range(&self, mdp: &Mdp) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in (0..mdp.n_states()).filter(|s| !mdp.is_terminal(*s)) {
            for a in 0..self.n_actions {
                lo = lo.min(self.q(s, a));
                hi = hi.max(self.q(s, a));
            }
        }
        (lo, hi)
    }

    /// Sup-norm distance to `estimate(s, a)` over non-terminal states.
    pub fn sup_error(&self, mdp: &Mdp, mut estimate: impl FnMut(usize, usize) -> f64) -> f64 {
        let mut err: f64 = 0.0;
        for s in (0..mdp.n_states()).filter(|s| !mdp.is_terminal(*s)) {
            for a in 0..self.n_actions {
                err = err.max((estimate(s, a) - self.q(s, a)).abs());
            }
        }
        err
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_args(gamma: f64, tol: f64) -> Result<()> {
    ensure((0.0..1.0).contains(&gamma), || format!("gamma {gamma} not in [0, 1)"))?;
    ensure(tol > 0.0 && tol.is_finite(), || format!("tolerance {tol} must be positive"))
}

/// Applies one backup `r + gamma * E[next_value(s')]` to every pair.
fn backup(mdp: &Mdp, gamma: f64, next_value: &[f64], out: &mut [f64]) {
    let na = mdp.n_actions();
    for s in 0..mdp.n_states() {
        for a in 0..na {
            out[s * na + a] = if mdp.is_terminal(s) {
                0.0
            } else {
                let ev: f64 = mdp.transition_row(s, a).iter().zip(next_value).map(|(p, v)| p * v).sum();
                mdp.reward(s, a) + gamma * ev
            };
        }
    }
}

fn iterate(mdp: &Mdp, gamma: f64, tol: f64, kind: PolicyKind, state_value: impl Fn(usize, &[f64]) -> f64) -> Result<OracleQ> {
    let na = mdp.n_actions();
    let mut q = vec![0.0; mdp.n_pairs()];
    let mut next = vec![0.0; mdp.n_pairs()];
    let mut v = vec![0.0; mdp.n_states()];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        for (s, vs) in v.iter_mut().enumerate() {
            *vs = state_value(s, &q[s * na..][..na]);
        }
        backup(mdp, gamma, &v, &mut next);
        residual = q.iter().zip(&next).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut q, &mut next);
        // q now holds T(q_old); its own residual is at most gamma * residual.
        if residual < tol {
            return Ok(OracleQ { n_actions: na, q, kind });
        }
    }
    Err(Error::NoConvergence { iterations: MAX_SWEEPS, residual })
}

/// Optimal action values by value iteration.
pub fn value_iteration(mdp: &Mdp, gamma: f64, tol: f64) -> Result<OracleQ> {
    check_args(gamma, tol)?;
    iterate(mdp, gamma, tol, PolicyKind::GreedyOptimal, |_, row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Action values of a fixed policy.
pub fn policy_evaluation(mdp: &Mdp, policy: &Policy, gamma: f64, tol: f64) -> Result<OracleQ> {
    check_args(gamma, tol)?;
    policy.check_matches(mdp)?;
    iterate(mdp, gamma, tol, PolicyKind::FixedPolicyEvaluation, |s, row| {
        policy.probs(s).iter().zip(row).map(|(p, q)| p * q).sum()
    })
}

/// Sup-norm residual of `q` under the optimal (`policy = None`) or fixed-policy operator.
pub fn bellman_residual(mdp: &Mdp, q: &OracleQ, gamma: f64, policy: Option<&Policy>) -> f64 {
    let na = mdp.n_actions();
    let v: Vec<f64> = (0..mdp.n_states())
        .map(|s| {
            let row = &q.table()[s * na..][..na];
            match policy {
                None => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Some(p) => p.probs(s).iter().zip(row).map(|(p, q)| p * q).sum(),
            }
        })
        .collect();
    let mut out = vec![0.0; mdp.n_pairs()];
    backup(mdp, gamma, &v, &mut out);
    out.iter().zip(q.table()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envlab::mdp::{build_chain, LEFT, RIGHT};

    #[test]
    fn self_loop_geometric_series() {
        let mdp = Mdp::new(1, 1, vec![1.0], vec![1.0], vec![false], 0).unwrap();
        let q = value_iteration(&mdp, 0.9, 1e-12).unwrap();
        assert!((q.q(0, 0) - 10.0).abs() < 1e-10);
    }

    #[test]
    fn two_state_chain_by_hand() {
        let mdp = build_chain(2, 0.0, 1.0).unwrap();
        let q = value_iteration(&mdp, 0.5, 1e-12).unwrap();
        assert!((q.q(0, RIGHT) - 1.0).abs() < 1e-12);
        assert!((q.q(0, LEFT) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn myopic_equals_reward() {
        let mdp = build_chain(6, 0.2, 3.0).unwrap();
        let q = value_iteration(&mdp, 0.0, 1e-9).unwrap();
        let pe = policy_evaluation(&mdp, &Policy::uniform(&mdp), 0.0, 1e-9).unwrap();
        for s in 0..6 {
            for a in 0..2 {
                assert_eq!(q.q(s, a), mdp.reward(s, a));
                assert_eq!(pe.q(s, a), mdp.reward(s, a));
            }
        }
    }

    #[test]
    fn uniform_policy_two_state_chain() {
        // q(0,L) = 0.5 * (0.5 q(0,R) + 0.5 q(0,L)), q(0,R) = 1  =>  q(0,L) = 0.25 / 0.75.
        let mdp = build_chain(2, 0.0, 1.0).unwrap();
        let q = policy_evaluation(&mdp, &Policy::uniform(&mdp), 0.5, 1e-13).unwrap();
        assert!((q.q(0, RIGHT) - 1.0).abs() < 1e-12);
        assert!((q.q(0, LEFT) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_policy_evaluation_matches_value_iteration() {
        let mdp = build_chain(7, 0.15, 1.0).unwrap();
        let tol = 1e-9;
        let vi = value_iteration(&mdp, 0.9, tol).unwrap();
        let pi = Policy::deterministic(&mdp, &vi.greedy_actions()).unwrap();
        let pe = policy_evaluation(&mdp, &pi, 0.9, tol).unwrap();
        for (a, b) in vi.table().iter().zip(pe.table()) {
            assert!((a - b).abs() <= 2.0 * tol);
        }
    }

    #[test]
    fn rejects_bad_gamma() {
        let mdp = build_chain(3, 0.0, 1.0).unwrap();
        assert!(value_iteration(&mdp, 1.0, 1e-6).is_err());
        assert!(value_iteration(&mdp, 0.5, 0.0).is_err());
    }
}
