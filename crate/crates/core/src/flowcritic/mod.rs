//! Flow-matching critics: Euler integration of a learned velocity field from
//! uniform noise to a Q-value estimate, TD targets and flow-matching losses.

mod config;
mod field;
mod loss;
mod model;
mod targets;

pub use config::{single_step_flow_ablation, FlowCriticConfig, FlowLoss, TargetUpdate, TimeSampling};
pub use field::{
    euler_integrate, integrate_terminal, integrate_with, mean_terminal, q_value, IntegrationTrace, NetField, OutputMode,
    VelocityField,
};
pub use loss::{
    distributional_loss_and_grad, floq_loss_and_grad, predict_target_loss_and_grad, DistSample, PushforwardTarget, ValueSample,
};
pub use model::{train_flow_critic, FlowCritic};
pub use targets::{dist_target, expected_td_target, noisy_velocity_target, DistTarget, NetTargetFlow, TargetFlow, TdTarget};
