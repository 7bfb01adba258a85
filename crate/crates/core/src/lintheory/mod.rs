//! Linear model of integration-based critics: a closed-form unrolled predictor,
//! slice-wise gradient flows with gain dynamics, the feature-learning /
//! feature-reweighting decomposition, and monolithic and ensemble baselines.

mod dynamics;
mod model;
mod process;

pub use dynamics::{
    decompose, ensemble_flow, flow_derivative, integrate_flow, mono_derivative, mono_flow, DecompositionRecord,
    EnsembleTrajectory, FlowOptions, FlowStatus, FlowTrajectory, MonoTrajectory, GAIN_CAP,
};
pub use model::{beta_coefficients, mean_predictor, unroll_predictor, LinearFlowModel};
pub use process::{gain_rhs, slice_flow_rhs, slice_loss, slice_moments, Moments, TargetProcess, TargetSchedule};
