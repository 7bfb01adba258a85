use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::flowcritic::FlowLoss;

/// Bumped whenever a config field changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    TdOracle,
    DistVsExpected,
    Staleness,
    TargetNoise,
    Freeze,
    FeatureNorms,
    TtrScaling,
    ConicAudit,
    PredictTargetAblation,
    SingleStepAblation,
    LinearTheory,
    EnsembleCollapse,
    UtdSweep,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 13] = [
        Self::TdOracle,
        Self::DistVsExpected,
        Self::Staleness,
        Self::TargetNoise,
        Self::Freeze,
        Self::FeatureNorms,
        Self::TtrScaling,
        Self::ConicAudit,
        Self::PredictTargetAblation,
        Self::SingleStepAblation,
        Self::LinearTheory,
        Self::EnsembleCollapse,
        Self::UtdSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TdOracle => "td-oracle",
            Self::DistVsExpected => "dist-vs-expected",
            Self::Staleness => "staleness",
            Self::TargetNoise => "target-noise",
            Self::Freeze => "freeze",
            Self::FeatureNorms => "feature-norms",
            Self::TtrScaling => "ttr-scaling",
            Self::ConicAudit => "conic-audit",
            Self::PredictTargetAblation => "predict-target-ablation",
            Self::SingleStepAblation => "single-step-ablation",
            Self::LinearTheory => "linear-theory",
            Self::EnsembleCollapse => "ensemble-collapse",
            Self::UtdSweep => "utd-sweep",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::TdOracle => "flow, MLP and ResNet critics against the value-iteration oracle",
            Self::DistVsExpected => "expected-value vs distributional flow backups on a stochastic-reward chain",
            Self::Staleness => "success under stale parameters for the first kappa% of integration steps",
            Self::TargetNoise => "oracle error as TD-target noise grows",
            Self::Freeze => "oracle error after freezing all but the final two layers mid-training",
            Self::FeatureNorms => "post-layernorm feature norms and mean Q under TD and MC targets",
            Self::TtrScaling => "decay exponent of perturbation error with integration steps",
            Self::ConicAudit => "conic-condition audit and trajectory containment on analytic fields",
            Self::PredictTargetAblation => "velocity regression vs predicting the final TD target",
            Self::SingleStepAblation => "multi-step flow vs one integration step trained at t = 0",
            Self::LinearTheory => "closed forms and gradient-flow checks for the linear flow model",
            Self::EnsembleCollapse => "ensemble of linear critics vs the averaged flow",
            Self::UtdSweep => "online fine-tuning from offline data across update-to-data ratios",
        }
    }

    /// Whether the experiment trains critics on the chain environment.
    pub fn trains_critics(self) -> bool {
        !matches!(self, Self::TtrScaling | Self::ConicAudit | Self::LinearTheory | Self::EnsembleCollapse)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSpec {
    pub n_states: usize,
    pub slip: f64,
    pub goal_reward: f64,
    /// Bernoulli success probability for a stochastic goal reward.
    pub bernoulli_reward: Option<f64>,
    pub gamma: f64,
    pub dataset_size: usize,
    pub dataset_seed: u64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self { n_states: 5, slip: 0.0, goal_reward: 1.0, bernoulli_reward: None, gamma: 0.9, dataset_size: 2000, dataset_seed: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticKind {
    Flow,
    Mono,
    Resnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSpec {
    pub kind: CriticKind,
    pub width: usize,
    pub depth: usize,
    /// Flow critics only.
    pub loss: FlowLoss,
    pub integration_steps: usize,
    pub target_samples: usize,
    pub n_eval: usize,
    /// Noise range is the dataset's return range widened by this margin.
    pub noise_margin: f64,
    /// One integration step trained only at `t = 0`.
    pub single_step: bool,
    pub target_update_every: usize,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            kind: CriticKind::Flow,
            width: 32,
            depth: 2,
            loss: FlowLoss::Expected,
            integration_steps: 8,
            target_samples: 4,
            n_eval: 4,
            noise_margin: 1.0,
            single_step: false,
            target_update_every: 100,
        }
    }
}

impl CriticSpec {
    pub fn of(kind: CriticKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn flow(loss: FlowLoss) -> Self {
        Self { loss, ..Self::default() }
    }

    /// Short name used as the metric prefix.
    pub fn name(&self) -> String {
        match self.kind {
            CriticKind::Mono => "mono".into(),
            CriticKind::Resnet => "resnet".into(),
            CriticKind::Flow if self.single_step => "flow-single-step".into(),
            CriticKind::Flow => match self.loss {
                FlowLoss::Expected => "flow".into(),
                FlowLoss::Distributional => "flow-distributional".into(),
                FlowLoss::PredictTarget => "flow-predict-target".into(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        ensure(self.width >= 1 && self.depth >= 1, || format!("{}: width and depth must be >= 1", self.name()))?;
        ensure(self.integration_steps >= 1 && self.target_samples >= 1 && self.n_eval >= 1, || {
            format!("{}: step and sample counts must be >= 1", self.name())
        })?;
        ensure(self.noise_margin > 0.0, || format!("{}: noise margin must be positive", self.name()))?;
        ensure(self.target_update_every >= 1, || format!("{}: target update period must be >= 1", self.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: usize,
    /// Oracle-error evaluation cadence.
    pub eval_every: usize,
    /// Stop once the oracle error drops below this value.
    pub early_stop: Option<f64>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 64, lr: 3e-3, log_every: 250, eval_every: 500, early_stop: None }
    }
}

/// Experiment-specific knobs. Fields an experiment does not use are ignored by it
/// but still enter the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Integrations averaged when scoring against the oracle.
    pub eval_integrations: usize,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
    /// td-oracle: error threshold and the fraction of seeds that must reach it.
    pub oracle_threshold: f64,
    pub min_converged_fraction: f64,
    /// dist-vs-expected: noise draws per (s, a) for Var_z(Q).
    pub variance_draws: usize,
    /// staleness: kappa grid in percent and where the stale snapshot is taken.
    pub staleness_pct: Vec<u32>,
    pub stale_fraction: f64,
    /// target-noise: noise half-widths as multiples of the oracle Q-range; first entry is the baseline.
    pub kappas: Vec<f64>,
    /// freeze: fraction of training before the freeze and how many final layers stay trainable.
    pub freeze_fraction: f64,
    pub trainable_tail: usize,
    /// ttr-scaling.
    pub ttr_k: Vec<usize>,
    pub ttr_trials: usize,
    pub ttr_bound: f64,
    pub ttr_c: Vec<f64>,
    /// conic-audit.
    pub conic_grid: usize,
    pub conic_steps: usize,
    pub conic_eps_g: f64,
    pub containment_trials: usize,
    /// linear-theory and ensemble-collapse.
    pub lin_models: usize,
    pub lin_t: usize,
    pub lin_dim: usize,
    pub lin_horizon: f64,
    pub ensemble_members: usize,
    /// utd-sweep. `reference_utd` is the large-scale grid, stored for comparison and never run.
    pub utd: Vec<usize>,
    pub reference_utd: Vec<usize>,
    pub env_steps: usize,
    pub offline_size: usize,
    pub epsilon: f64,
    pub curve_every: usize,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            eval_integrations: 64,
            eval_episodes: 20,
            eval_horizon: 50,
            oracle_threshold: 0.05,
            min_converged_fraction: 0.8,
            variance_draws: 64,
            staleness_pct: vec![0, 25, 50, 75, 100],
            stale_fraction: 0.2,
            kappas: vec![0.0, 0.25, 0.5, 1.0],
            freeze_fraction: 0.5,
            trainable_tail: 2,
            ttr_k: vec![8, 16, 32, 64, 128],
            ttr_trials: 64,
            ttr_bound: 0.1,
            ttr_c: vec![0.5, 1.0],
            conic_grid: 200,
            conic_steps: 16,
            conic_eps_g: 0.05,
            containment_trials: 1000,
            lin_models: 100,
            lin_t: 6,
            lin_dim: 3,
            lin_horizon: 6.0,
            ensemble_members: 5,
            utd: vec![1, 4, 16],
            reference_utd: vec![32, 64, 128],
            env_steps: 300,
            offline_size: 200,
            epsilon: 0.1,
            curve_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentId,
    #[serde(default)]
    pub env: EnvSpec,
    #[serde(default)]
    pub critics: Vec<CriticSpec>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub params: Params,
    /// Where artifacts go; not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults with seeds 0..10.
    pub fn default_for(id: ExperimentId) -> Self {
        use CriticKind::*;
        let mut cfg = Self {
            schema_version: SCHEMA_VERSION,
            experiment: id,
            env: EnvSpec::default(),
            critics: Vec::new(),
            schedule: ScheduleSpec::default(),
            seeds: (0..10).collect(),
            params: Params::default(),
            out_dir: None,
        };
        match id {
            ExperimentId::TdOracle => {
                cfg.critics = vec![CriticSpec::of(Flow), CriticSpec::of(Mono), CriticSpec::of(Resnet)];
                cfg.schedule.steps = 20_000;
                cfg.schedule.early_stop = Some(cfg.params.oracle_threshold);
            }
            ExperimentId::DistVsExpected => {
                cfg.critics = vec![CriticSpec::flow(FlowLoss::Expected), CriticSpec::flow(FlowLoss::Distributional)];
                cfg.env.bernoulli_reward = Some(0.5);
            }
            ExperimentId::Staleness
            | ExperimentId::TargetNoise
            | ExperimentId::Freeze
            | ExperimentId::FeatureNorms
            | ExperimentId::UtdSweep => {
                cfg.critics = vec![CriticSpec::of(Flow), CriticSpec::of(Mono)];
            }
            ExperimentId::PredictTargetAblation => {
                cfg.critics = vec![CriticSpec::flow(FlowLoss::Expected), CriticSpec::flow(FlowLoss::PredictTarget)];
            }
            ExperimentId::SingleStepAblation => {
                let single = CriticSpec { single_step: true, ..CriticSpec::of(Flow) };
                cfg.critics = vec![CriticSpec::of(Flow), single, CriticSpec::of(Mono)];
            }
            ExperimentId::TtrScaling | ExperimentId::ConicAudit | ExperimentId::LinearTheory | ExperimentId::EnsembleCollapse => {
            }
        }
        if id == ExperimentId::UtdSweep {
            cfg.schedule.log_every = 1000;
        }
        cfg
    }

    /// Same experiment at a size that finishes in seconds; used for determinism checks.
    pub fn smoke(id: ExperimentId) -> Self {
        let mut cfg = Self::default_for(id);
        cfg.seeds = vec![0, 1];
        cfg.env.dataset_size = 300;
        cfg.schedule.steps = 200;
        cfg.schedule.eval_every = 100;
        cfg.schedule.log_every = 50;
        cfg.params.eval_integrations = 8;
        cfg.params.eval_episodes = 4;
        cfg.params.variance_draws = 8;
        cfg.params.kappas = vec![0.0, 1.0];
        cfg.params.ttr_trials = 8;
        cfg.params.conic_grid = 40;
        cfg.params.containment_trials = 50;
        cfg.params.lin_models = 10;
        cfg.params.utd = vec![1, 2];
        cfg.params.env_steps = 20;
        cfg.params.offline_size = 50;
        cfg.params.curve_every = 10;
        for c in &mut cfg.critics {
            c.width = 8;
            c.integration_steps = c.integration_steps.min(4);
        }
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.schema_version == SCHEMA_VERSION, || {
            format!("schema version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version)
        })?;
        ensure(!self.seeds.is_empty(), || "seeds must be nonempty".into())?;
        ensure(self.seeds.iter().collect::<BTreeSet<_>>().len() == self.seeds.len(), || "seeds must be distinct".into())?;
        let e = &self.env;
        ensure(e.n_states >= 2 && e.dataset_size >= 1, || "environment needs >= 2 states and a nonempty dataset".into())?;
        ensure((0.0..1.0).contains(&e.gamma), || "gamma must be in [0, 1)".into())?;
        if let Some(p) = e.bernoulli_reward {
            ensure(p > 0.0 && p <= 1.0, || "bernoulli reward probability must be in (0, 1]".into())?;
        }
        let s = &self.schedule;
        ensure(s.steps >= 1 && s.batch_size >= 1 && s.log_every >= 1 && s.eval_every >= 1, || {
            "schedule counts must be >= 1".into()
        })?;
        ensure(s.lr > 0.0, || "learning rate must be positive".into())?;
        for c in &self.critics {
            c.validate()?;
        }
        let names: BTreeSet<String> = self.critics.iter().map(CriticSpec::name).collect();
        ensure(names.len() == self.critics.len(), || "critic names must be distinct".into())?;
        if self.experiment.trains_critics() {
            ensure(!self.critics.is_empty(), || format!("{} needs at least one critic", self.experiment))?;
        }
        let p = &self.params;
        ensure(p.eval_integrations >= 1 && p.eval_episodes >= 1 && p.eval_horizon >= 1, || {
            "evaluation counts must be >= 1".into()
        })?;
        match self.experiment {
            ExperimentId::DistVsExpected | ExperimentId::PredictTargetAblation => {
                ensure(self.critics.iter().all(|c| c.kind == CriticKind::Flow), || "comparison needs flow critics".into())?;
                let strip = |c: &CriticSpec| CriticSpec { loss: FlowLoss::Expected, ..c.clone() };
                ensure(self.critics.windows(2).all(|w| strip(&w[0]) == strip(&w[1])), || {
                    "critics may differ only in the loss flag".into()
                })?;
            }
            ExperimentId::Staleness => {
                ensure(p.staleness_pct.iter().all(|k| *k <= 100), || "kappa must be within 0..=100".into())?;
                ensure(p.stale_fraction > 0.0 && p.stale_fraction < 1.0, || "stale fraction must be in (0, 1)".into())?;
            }
            ExperimentId::TargetNoise => {
                ensure(p.kappas.len() >= 2 && p.kappas[0] == 0.0, || "kappa grid must start at 0 and have >= 2 entries".into())?;
                ensure(p.kappas.windows(2).all(|w| w[0] < w[1]), || "kappa grid must increase".into())?;
                self.require_flow_and_mono()?;
            }
            ExperimentId::Freeze => {
                ensure(p.freeze_fraction > 0.0 && p.freeze_fraction < 1.0, || "freeze fraction must be in (0, 1)".into())?;
                ensure(p.trainable_tail >= 1, || "at least one layer must stay trainable".into())?;
                self.require_flow_and_mono()?;
            }
            ExperimentId::TtrScaling => {
                let ks: BTreeSet<usize> = p.ttr_k.iter().copied().collect();
                ensure(ks.len() >= 4 && p.ttr_trials >= 1 && p.ttr_bound > 0.0, || {
                    "TTR fit needs >= 4 distinct K, trials and a bound".into()
                })?;
                ensure(p.ttr_c.iter().all(|c| *c > 0.0 && *c <= 1.0), || "field contraction c must be in (0, 1]".into())?;
            }
            ExperimentId::ConicAudit => {
                ensure(p.conic_grid >= 2 && p.conic_steps >= 1 && p.containment_trials >= 1, || {
                    "conic grid and trials must be positive".into()
                })?;
                ensure(p.conic_eps_g > 0.0 && p.conic_eps_g < 1.0, || "eps_g must be in (0, 1)".into())?;
            }
            ExperimentId::LinearTheory | ExperimentId::EnsembleCollapse => {
                ensure(p.lin_models >= 1 && p.lin_t >= 3 && p.lin_dim >= 1 && p.lin_horizon > 0.0, || {
                    "linear model sizes invalid".into()
                })?;
                ensure(p.ensemble_members >= 1, || "ensemble needs members".into())?;
            }
            ExperimentId::UtdSweep => {
                ensure(!p.utd.is_empty() && p.utd.iter().all(|u| *u >= 1), || "UTD ratios must be >= 1".into())?;
                ensure(p.env_steps >= 1 && p.offline_size >= 1 && p.curve_every >= 1, || "online run sizes must be >= 1".into())?;
                ensure((0.0..=1.0).contains(&p.epsilon), || "epsilon must be in [0, 1]".into())?;
            }
            _ => {}
        }
        Ok(())
    }

    fn require_flow_and_mono(&self) -> Result<()> {
        let has = |n: &str| self.critics.iter().any(|c| c.name() == n);
        ensure(has("flow") && has("mono"), || format!("{} compares critics named 'flow' and 'mono'", self.experiment))
    }

    /// SHA-256 of the canonical JSON with the output directory removed.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out_dir = None;
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
