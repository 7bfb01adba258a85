//! Diagnostics for trained or analytic critics: conic audits, test-time recovery
//! measurement, staleness injection, layer freezing and feature-norm tracking.

mod conic;
mod plasticity;
mod staleness;
mod ttr;

pub use conic::{audit_conic, AuditGrid, ConicAuditReport, ConicRegion};
pub use plasticity::{feature_norm_series, freeze_and_continue, replay_feature_norms, write_feature_norm_csv, FeatureNormPoint};
pub use staleness::{
    evaluate_flow_policy, evaluate_mono_policy, greedy_rollouts, mono_staleness_analog, splice_stale_layers, stale_steps,
    staleness_probe, EvalResult, EvalSpec,
};
pub use ttr::{
    containment_trials, endpoint_sensitivity, fit_ttr_exponent, log_log_fit, perturbed_integrate, ContainmentReport,
    PerturbationKind, PerturbationSpec, PerturbedRun, TtrReport, TtrRow,
};
