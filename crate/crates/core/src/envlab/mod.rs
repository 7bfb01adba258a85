//! Toy MDPs, offline data and exact value oracles.

mod dataset;
mod mdp;
mod oracle;

pub use dataset::{collect_dataset, mc_returns, Dataset, McReturns, Transition, EPISODE_CAP};
pub use mdp::{build_chain, FeatureMap, Mdp, Policy, RewardNoise, LEFT, RIGHT};
pub(crate) use oracle::argmax;
pub use oracle::{bellman_residual, policy_evaluation, value_iteration, OracleQ, PolicyKind};
