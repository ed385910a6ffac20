//! Experiment configuration: TOML schema, presets and validation.

use std::fmt;
use std::sync::Arc;

use onda_core::ambiguity::{ConcentrationParams, ConfidenceSchedule};
use onda_core::icover::BallMetric;
use onda_core::model::{CostModel, DecisionVector, PortfolioModel, QuadraticModel, Tolerances};
use onda_core::onda::{CoverSpec, EpochStop, RunConfig, StepRuleSpec};
use onda_core::par::ExecPolicy;
use onda_core::stream::{self, ArrivalSchedule, MixtureComponent, MixtureSpec, TimedSample};
use onda_core::subgrad::{StepNorm, StepSizeRule, StepVariant};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A config problem, located by its field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl fmt::Display) -> Self {
        ConfigError { path: path.into(), message: message.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "invalid config: {}", self.message)
        } else {
            write!(f, "invalid config at `{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub seed: u64,
    pub model: ModelConfig,
    pub mixture: MixtureConfig,
    pub stream: StreamConfig,
    pub run: RunSection,
    pub x0: InitialDecision,
    pub validation: ValidationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `f = ‖x‖² − ‖ξ‖²`.
    Isotropic { d: usize, m: usize },
    /// Row-major `A` (d×d), `B` (d×m), `C` (m×m).
    Quadratic { d: usize, m: usize, a: Vec<f64>, b: Vec<f64>, c: Vec<f64> },
    Portfolio { rho: f64 },
    /// Random `A = GᵀG`, `B`, `C = −(HᵀH + I)` drawn from the seed.
    Study2 { d: usize, m: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixtureConfig {
    Gaussian { components: Vec<MixtureComponent> },
    /// Three unit-covariance centers with uniform means, drawn from the
    /// seed; needs the `study2` model.
    Study2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub count: usize,
    pub schedule: ArrivalSchedule,
    /// Seconds per period.
    pub period: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concentration {
    pub c1: f64,
    pub c2: f64,
    pub a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverToggle {
    pub enabled: bool,
    pub omega: f64,
    #[serde(default)]
    pub metric: BallMetric,
}

fn default_max_epoch_steps() -> u64 {
    1_000_000
}

fn default_max_afwa_iters() -> usize {
    onda_core::simplex::DEFAULT_MAX_ITERS
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub eps1: f64,
    pub eps2: f64,
    pub eps_sa: f64,
    /// `β_n = beta_scale · exp(1 − √n)`.
    pub beta_scale: f64,
    pub concentration: Concentration,
    pub step: StepRuleSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n0: Option<usize>,
    pub cover: CoverToggle,
    pub cost_budget_per_period: u64,
    #[serde(default)]
    pub epoch_stop: EpochStop,
    #[serde(default = "default_max_epoch_steps")]
    pub max_epoch_steps: u64,
    #[serde(default = "default_max_afwa_iters")]
    pub max_afwa_iters: usize,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDecision {
    Zeros,
    /// Each coordinate uniform on `[lo, hi]`, drawn from the seed.
    Uniform { lo: f64, hi: f64 },
    Value { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub n_val: usize,
    pub max_iters: usize,
    /// Step scale of the validation optimizer.
    pub diameter: f64,
}

pub const PRESETS: [&str; 2] = ["study1", "study2"];

/// Toy problem in `ℝ` with three-center data in `ℝ³`.
pub fn study1(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        preset: Some("study1".into()),
        seed,
        model: ModelConfig::Isotropic { d: 1, m: 3 },
        mixture: MixtureConfig::Gaussian { components: stream::study1_mixture().components },
        stream: StreamConfig { count: 200, schedule: ArrivalSchedule::FixedPeriod, period: 1.0 },
        run: RunSection {
            eps1: 1e-5,
            eps2: 1e-4,
            eps_sa: 5e-5,
            beta_scale: 0.95,
            concentration: Concentration { c1: 2.0, c2: 1.0, a: 2.0 },
            step: StepRuleSpec {
                variant: StepVariant::Harmonic,
                diameter: 20.0,
                subgradient_bound: 1.0,
                norm: StepNorm::L1,
            },
            n0: None,
            cover: CoverToggle { enabled: false, omega: 1.5, metric: BallMetric::Euclidean },
            cost_budget_per_period: 1_000_000_000,
            epoch_stop: EpochStop::Table,
            max_epoch_steps: default_max_epoch_steps(),
            max_afwa_iters: default_max_afwa_iters(),
            parallel: true,
        },
        x0: InitialDecision::Uniform { lo: -10.0, hi: 10.0 },
        validation: ValidationConfig { n_val: 10_000, max_iters: 20_000, diameter: 10.0 },
    }
}

/// Decision in `ℝ³⁰`, data in `ℝ¹⁰` arriving every 1 to 3 periods.
pub fn study2(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        preset: Some("study2".into()),
        seed,
        model: ModelConfig::Study2 { d: 30, m: 10 },
        mixture: MixtureConfig::Study2,
        stream: StreamConfig { count: 500, schedule: ArrivalSchedule::UniformRandomPeriod { lo: 1.0, hi: 3.0 }, period: 1.0 },
        run: RunSection {
            eps1: 1e-2,
            eps2: 1e-1,
            eps_sa: 5e-2,
            beta_scale: 0.95,
            concentration: Concentration { c1: 2.0, c2: 1.0, a: 2.0 },
            step: StepRuleSpec {
                variant: StepVariant::Harmonic,
                diameter: 10.0,
                subgradient_bound: 1.0,
                norm: StepNorm::L1,
            },
            n0: None,
            cover: CoverToggle { enabled: true, omega: 5.0, metric: BallMetric::Euclidean },
            cost_budget_per_period: 1_000_000_000,
            epoch_stop: EpochStop::Table,
            max_epoch_steps: 20_000,
            max_afwa_iters: default_max_afwa_iters(),
            parallel: true,
        },
        x0: InitialDecision::Uniform { lo: -10.0, hi: 10.0 },
        validation: ValidationConfig { n_val: 10_000, max_iters: 2_000, diameter: 10.0 },
    }
}

pub fn preset(name: &str, seed: u64) -> Result<ExperimentConfig, ConfigError> {
    match name {
        "study1" => Ok(study1(seed)),
        "study2" => Ok(study2(seed)),
        other => Err(ConfigError::new("preset", format!("unknown preset `{other}` (expected one of {PRESETS:?})"))),
    }
}

/// Parse TOML, reporting the path of the first offending field.
pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::new("", e.to_string().trim_end()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(if path == "." { String::new() } else { path }, e.into_inner().to_string().trim_end())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("configs always serialize")
}

/// Everything a run needs, built from a validated config.
pub struct Built {
    pub model: Arc<dyn CostModel>,
    pub mixture: MixtureSpec,
    pub run: RunConfig,
    pub x0: DecisionVector,
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn dims(&self) -> (usize, usize) {
        match &self.model {
            ModelConfig::Isotropic { d, m } | ModelConfig::Quadratic { d, m, .. } | ModelConfig::Study2 { d, m } => {
                (*d, *m)
            }
            ModelConfig::Portfolio { .. } => (1, 2),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed > i64::MAX as u64 {
            return Err(ConfigError::new("seed", "must fit in a signed 64-bit integer"));
        }
        let (d, m) = self.dims();
        if d == 0 || m == 0 {
            return Err(ConfigError::new("model", "dimensions must be positive"));
        }
        if let ModelConfig::Quadratic { a, b, c, .. } = &self.model {
            for (name, v, len) in [("a", a, d * d), ("b", b, d * m), ("c", c, m * m)] {
                if v.len() != len {
                    return Err(ConfigError::new(format!("model.{name}"), format!("expected {len} entries, got {}", v.len())));
                }
            }
        }
        if let ModelConfig::Portfolio { rho } = self.model {
            positive("model.rho", rho)?;
        }
        match (&self.model, &self.mixture) {
            (ModelConfig::Study2 { .. }, MixtureConfig::Study2) => {}
            (_, MixtureConfig::Study2) => {
                return Err(ConfigError::new("mixture.kind", "the study2 mixture needs the study2 model"));
            }
            (_, MixtureConfig::Gaussian { components }) => {
                if components.is_empty() {
                    return Err(ConfigError::new("mixture.components", "needs at least one component"));
                }
                for (i, c) in components.iter().enumerate() {
                    if c.mean.len() != m {
                        return Err(ConfigError::new(
                            format!("mixture.components[{i}].mean"),
                            format!("expected {m} entries, got {}", c.mean.len()),
                        ));
                    }
                }
                MixtureSpec { components: components.clone() }
                    .sampler()
                    .map_err(|e| ConfigError::new("mixture.components", e))?;
            }
        }
        if self.stream.count == 0 {
            return Err(ConfigError::new("stream.count", "must be at least 1"));
        }
        positive("stream.period", self.stream.period)?;
        self.stream.schedule.validate().map_err(|e| ConfigError::new("stream.schedule", e))?;

        let r = &self.run;
        positive("run.eps1", r.eps1)?;
        positive("run.eps2", r.eps2)?;
        positive("run.eps_sa", r.eps_sa)?;
        Tolerances::new(r.eps1, r.eps2, r.eps_sa, r.step.subgradient_bound)
            .map_err(|e| ConfigError::new("run.eps_sa", e))?;
        if !(r.beta_scale > 0.0 && r.beta_scale < 1.0) {
            return Err(ConfigError::new("run.beta_scale", format!("must lie in (0, 1), got {}", r.beta_scale)));
        }
        ConcentrationParams::new(r.concentration.c1, r.concentration.c2, r.concentration.a, m)
            .map_err(|e| ConfigError::new("run.concentration", e))?;
        positive("run.step.diameter", r.step.diameter)?;
        positive("run.step.subgradient_bound", r.step.subgradient_bound)?;
        StepSizeRule::new(r.step.variant, r.step.diameter, r.eps2, r.eps_sa, r.step.subgradient_bound)
            .map_err(|e| ConfigError::new("run.step", e))?;
        if r.n0 == Some(0) {
            return Err(ConfigError::new("run.n0", "must be at least 1"));
        }
        positive("run.cover.omega", r.cover.omega)?;
        if r.cost_budget_per_period == 0 {
            return Err(ConfigError::new("run.cost_budget_per_period", "must be at least 1"));
        }
        if r.max_epoch_steps == 0 {
            return Err(ConfigError::new("run.max_epoch_steps", "must be at least 1"));
        }
        if r.max_afwa_iters == 0 {
            return Err(ConfigError::new("run.max_afwa_iters", "must be at least 1"));
        }
        match &self.x0 {
            InitialDecision::Zeros => {}
            InitialDecision::Uniform { lo, hi } => {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return Err(ConfigError::new("x0", format!("needs finite lo < hi, got [{lo}, {hi}]")));
                }
            }
            InitialDecision::Value { values } => {
                if values.len() != d {
                    return Err(ConfigError::new("x0.values", format!("expected {d} entries, got {}", values.len())));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(ConfigError::new("x0.values", "entries must be finite"));
                }
            }
        }
        if self.validation.n_val == 0 {
            return Err(ConfigError::new("validation.n_val", "must be at least 1"));
        }
        if self.validation.max_iters == 0 {
            return Err(ConfigError::new("validation.max_iters", "must be at least 1"));
        }
        positive("validation.diameter", self.validation.diameter)?;
        Ok(())
    }

    pub fn policy(&self) -> ExecPolicy {
        if self.run.parallel {
            ExecPolicy::Parallel
        } else {
            ExecPolicy::Sequential
        }
    }

    pub fn schedule(&self) -> ConfidenceSchedule {
        ConfidenceSchedule::ExpSqrt { scale: self.run.beta_scale }
    }

    pub fn concentration(&self) -> ConcentrationParams {
        let c = self.run.concentration;
        ConcentrationParams { c1: c.c1, c2: c.c2, a: c.a, m: self.dims().1 }
    }

    pub fn build(&self) -> Result<Built, ConfigError> {
        self.validate()?;
        let (d, m) = self.dims();
        let (model, mixture): (Arc<dyn CostModel>, MixtureSpec) = match (&self.model, &self.mixture) {
            (ModelConfig::Study2 { d, m }, MixtureConfig::Study2) => {
                let (mix, model) = stream::study2_problem(self.seed, *d, *m).map_err(|e| ConfigError::new("model", e))?;
                (Arc::new(model), mix)
            }
            (model, MixtureConfig::Gaussian { components }) => {
                let mix = MixtureSpec { components: components.clone() };
                let model: Arc<dyn CostModel> = match model {
                    ModelConfig::Isotropic { d, m } => Arc::new(QuadraticModel::isotropic(*d, *m)),
                    ModelConfig::Quadratic { d, m, a, b, c } => Arc::new(
                        QuadraticModel::from_rows(*d, *m, a, b, c).map_err(|e| ConfigError::new("model", e))?,
                    ),
                    ModelConfig::Portfolio { rho } => {
                        Arc::new(PortfolioModel::new(*rho).map_err(|e| ConfigError::new("model.rho", e))?)
                    }
                    ModelConfig::Study2 { d, m } => {
                        let (_, model) =
                            stream::study2_problem(self.seed, *d, *m).map_err(|e| ConfigError::new("model", e))?;
                        Arc::new(model)
                    }
                };
                (model, mix)
            }
            (_, MixtureConfig::Study2) => unreachable!("rejected by validate"),
        };
        debug_assert_eq!((model.decision_dim(), model.sample_dim()), (d, m));

        let r = &self.run;
        let mut run = RunConfig::new(
            Tolerances::new(r.eps1, r.eps2, r.eps_sa, r.step.subgradient_bound).map_err(|e| ConfigError::new("run", e))?,
            self.schedule(),
            self.concentration(),
            r.step,
        );
        run.n0 = r.n0;
        run.cover = r.cover.enabled.then_some(CoverSpec { omega: r.cover.omega, metric: r.cover.metric });
        run.cost_budget_per_period = r.cost_budget_per_period;
        run.period = self.stream.period;
        run.epoch_stop = r.epoch_stop;
        run.max_epoch_steps = r.max_epoch_steps;
        run.max_afwa_iters = r.max_afwa_iters;
        run.policy = self.policy();
        run.validate().map_err(|e| ConfigError::new("run", e))?;

        let x0 = match &self.x0 {
            InitialDecision::Zeros => vec![0.0; d],
            InitialDecision::Uniform { lo, hi } => {
                let mut rng = stream::rng_for(self.seed, stream::purpose::INITIAL_DECISION);
                (0..d).map(|_| rng.random_range(*lo..=*hi)).collect()
            }
            InitialDecision::Value { values } => values.clone(),
        };
        let x0 = DecisionVector::new(x0).map_err(|e| ConfigError::new("x0", e))?;
        Ok(Built { model, mixture, run, x0 })
    }

    /// The seeded, timestamped stream.
    pub fn samples(&self, mixture: &MixtureSpec) -> anyhow::Result<Vec<TimedSample>> {
        let pts = stream::sample_stream(mixture, self.seed, self.stream.count)?;
        let times = self.stream.schedule.times(self.seed, self.stream.count, self.stream.period)?;
        Ok(stream::timed(pts, &times)?)
    }
}
