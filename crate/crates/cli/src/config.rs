//! Experiment configuration.
//!
//! Configs are TOML documents. Every table rejects unknown keys, omitted keys
//! take the defaults of [`ExperimentConfig::default_for`], and
//! [`ExperimentConfig::validate`] runs before any experiment starts.
//!
//! ```toml
//! experiment = "clean-bench"
//! seed = 0
//!
//! [cleaning]
//! gamma = 0.4
//!
//! [solver]
//! steps = 2000
//! batch = 256
//!
//! [[methods]]
//! method = "FSLA"
//!
//! [[methods]]
//! method = "NS"
//! t = 1
//! k = 10
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use bilevel::solvers::{BaselineConfig, Estimator, Schedule, StepOrdering};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("config key `{key}`: {msg}")]
    Invalid { key: String, msg: String },

    #[error("config declares experiment `{found}` but the command is `{expected}`")]
    KindMismatch {
        expected: ExperimentKind,
        found: ExperimentKind,
    },
}

fn invalid(key: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    HypergradBench,
    FslaRun,
    CleanBench,
    OracleCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::HypergradBench => "hypergrad-bench",
            ExperimentKind::FslaRun => "fsla-run",
            ExperimentKind::CleanBench => "clean-bench",
            ExperimentKind::OracleCheck => "oracle-check",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticConfig {
    /// Inner dimension `n`.
    pub inner_dim: usize,
    /// Outer dimension `m`.
    pub outer_dim: usize,
    pub samples: usize,
    pub noise_std: f64,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        QuadraticConfig {
            inner_dim: 5,
            outer_dim: 5,
            samples: 10_000,
            noise_std: 0.1f64.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleaningConfig {
    pub train: usize,
    pub val: usize,
    pub dim: usize,
    /// Fraction of training labels flipped.
    pub gamma: f64,
    /// Distance between the two class centers.
    pub separation: f64,
    pub ridge: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            train: 500,
            val: 500,
            dim: 10,
            gamma: 0.4,
            separation: 3.0,
            ridge: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypergradConfig {
    pub k_grid: Vec<usize>,
    /// Inner step size shared by the trajectory and every estimator.
    pub beta: f64,
    /// Residual tolerance for CG.
    pub tol: f64,
    /// Decay exponents of the synthetic inner sequences.
    pub alphas: Vec<f64>,
}

impl Default for HypergradConfig {
    fn default() -> Self {
        HypergradConfig {
            k_grid: (0..=12).map(|p| 1usize << p).collect(),
            beta: 0.2,
            tol: 1e-12,
            alphas: vec![2.0, 1.0, 0.5, 0.25],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    #[default]
    Sequential,
    Lagged,
}

impl From<Ordering> for StepOrdering {
    fn from(o: Ordering) -> Self {
        match o {
            Ordering::Sequential => StepOrdering::Sequential,
            Ordering::Lagged => StepOrdering::Lagged,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub delta: f64,
    pub c_tau: f64,
    pub c_beta: f64,
    pub c_eta: f64,
}

impl From<ScheduleConfig> for Schedule {
    fn from(s: ScheduleConfig) -> Self {
        Schedule {
            delta: s.delta,
            c_tau: s.c_tau,
            c_beta: s.c_beta,
            c_eta: s.c_eta,
        }
    }
}

impl From<Schedule> for ScheduleConfig {
    fn from(s: Schedule) -> Self {
        ScheduleConfig {
            delta: s.delta,
            c_tau: s.c_tau,
            c_beta: s.c_beta,
            c_eta: s.c_eta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub steps: usize,
    /// Mini-batch size; `0` selects the full batch.
    pub batch: usize,
    pub ordering: Ordering,
    /// Omitted: a problem-specific default (see the README).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            steps: 2000,
            batch: 256,
            ordering: Ordering::Sequential,
            schedule: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MethodKind {
    Fsla,
    Bp,
    Ns,
    Cg,
}

fn one() -> usize {
    1
}

fn ten() -> usize {
    10
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: MethodKind,
    /// Inner steps per hyper-iteration (baselines only).
    #[serde(default = "one")]
    pub t: usize,
    /// Estimator steps (baselines only).
    #[serde(default = "ten")]
    pub k: usize,
    #[serde(default = "yes")]
    pub warm_start: bool,
    /// Neumann step; defaults to `2/(μ + L)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// CG residual tolerance; defaults to `1e-10`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Inner learning rate; defaults to `1/L`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_lr: Option<f64>,
}

impl MethodConfig {
    pub fn fsla() -> Self {
        MethodConfig {
            method: MethodKind::Fsla,
            t: 1,
            k: 10,
            warm_start: true,
            beta: None,
            tol: None,
            inner_lr: None,
        }
    }

    pub fn baseline(method: MethodKind, t: usize, k: usize) -> Self {
        MethodConfig {
            method,
            t,
            k,
            ..MethodConfig::fsla()
        }
    }

    /// `FSLA` or `METHOD-T-K`.
    pub fn label(&self) -> String {
        match self.method {
            MethodKind::Fsla => "FSLA".to_string(),
            m => format!("{m:?}-{}-{}", self.t, self.k).to_uppercase(),
        }
    }

    /// Baseline solver settings, or `None` for FSLA.
    pub fn baseline_config(&self, schedule: Schedule) -> Option<BaselineConfig> {
        let estimator = match self.method {
            MethodKind::Fsla => return None,
            MethodKind::Bp => Estimator::Bp,
            MethodKind::Ns => Estimator::Ns { beta: self.beta },
            MethodKind::Cg => Estimator::Cg {
                tol: self.tol.unwrap_or(1e-10),
            },
        };
        Some(BaselineConfig {
            estimator,
            t: self.t,
            k: self.k,
            warm_start: self.warm_start,
            inner_lr: self.inner_lr,
            schedule,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCheckConfig {
    /// Any of `quadratic`, `cleaning` and `broken` (a deliberately wrong
    /// quadratic used to exercise the failure path).
    pub problems: Vec<String>,
    pub points: usize,
    pub h: f64,
    pub tol: f64,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        OracleCheckConfig {
            problems: vec!["quadratic".into(), "cleaning".into()],
            points: 10,
            h: 1e-5,
            tol: 1e-4,
        }
    }
}

pub const CHECKABLE_PROBLEMS: [&str; 3] = ["quadratic", "cleaning", "broken"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub quadratic: QuadraticConfig,
    #[serde(default)]
    pub cleaning: CleaningConfig,
    #[serde(default)]
    pub hypergrad: HypergradConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub oracle_check: OracleCheckConfig,
}

impl ExperimentConfig {
    pub fn default_for(kind: ExperimentKind) -> Self {
        let mut cfg = ExperimentConfig {
            experiment: kind,
            seed: 0,
            output: None,
            quadratic: QuadraticConfig::default(),
            cleaning: CleaningConfig::default(),
            hypergrad: HypergradConfig::default(),
            solver: SolverConfig::default(),
            methods: default_methods(kind),
            oracle_check: OracleCheckConfig::default(),
        };
        if kind == ExperimentKind::FslaRun {
            cfg.solver.steps = 5000;
        }
        cfg
    }

    /// Parses and validates a TOML document. Sections that are absent take
    /// the defaults for the declared experiment.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let defaults = Self::default_for(cfg.experiment);
        if !table.contains_key("methods") {
            cfg.methods = defaults.methods;
        }
        let solver_steps_given = table
            .get("solver")
            .and_then(|s| s.as_table())
            .is_some_and(|s| s.contains_key("steps"));
        if !solver_steps_given {
            cfg.solver.steps = defaults.solver.steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let q = &self.quadratic;
        positive_count("quadratic.inner_dim", q.inner_dim)?;
        positive_count("quadratic.outer_dim", q.outer_dim)?;
        positive_count("quadratic.samples", q.samples)?;
        if !(q.noise_std >= 0.0 && q.noise_std.is_finite()) {
            return Err(invalid("quadratic.noise_std", "must be finite and non-negative"));
        }

        let c = &self.cleaning;
        positive_count("cleaning.train", c.train)?;
        positive_count("cleaning.val", c.val)?;
        if c.dim < 2 {
            return Err(invalid("cleaning.dim", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&c.gamma) {
            return Err(invalid("cleaning.gamma", "must lie in [0, 1)"));
        }
        if !c.separation.is_finite() {
            return Err(invalid("cleaning.separation", "must be finite"));
        }
        positive("cleaning.ridge", c.ridge)?;

        let h = &self.hypergrad;
        if h.k_grid.is_empty() {
            return Err(invalid("hypergrad.k_grid", "must not be empty"));
        }
        if h.k_grid.contains(&0) {
            return Err(invalid("hypergrad.k_grid", "every K must be at least 1"));
        }
        positive("hypergrad.beta", h.beta)?;
        positive("hypergrad.tol", h.tol)?;
        for (i, &a) in h.alphas.iter().enumerate() {
            positive(&format!("hypergrad.alphas[{i}]"), a)?;
        }

        let s = &self.solver;
        positive_count("solver.steps", s.steps)?;
        if let Some(sched) = &s.schedule {
            positive("solver.schedule.delta", sched.delta)?;
            positive("solver.schedule.c_tau", sched.c_tau)?;
            positive("solver.schedule.c_beta", sched.c_beta)?;
            positive("solver.schedule.c_eta", sched.c_eta)?;
        }
        if s.batch > 0 {
            let size = match self.experiment {
                ExperimentKind::CleanBench => c.train.min(c.val),
                _ => q.samples,
            };
            if s.batch > size {
                return Err(invalid(
                    "solver.batch",
                    format!("{} exceeds the dataset size {size}", s.batch),
                ));
            }
        }

        let mut labels = BTreeSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            let key = |field: &str| format!("methods[{i}].{field}");
            if m.method != MethodKind::Fsla {
                positive_count(&key("t"), m.t)?;
                positive_count(&key("k"), m.k)?;
            }
            if let Some(b) = m.beta {
                positive(&key("beta"), b)?;
            }
            if let Some(t) = m.tol {
                positive(&key("tol"), t)?;
            }
            if let Some(lr) = m.inner_lr {
                positive(&key("inner_lr"), lr)?;
            }
            if !labels.insert(m.label()) {
                return Err(invalid(key("method"), format!("duplicate method `{}`", m.label())));
            }
        }
        if matches!(self.experiment, ExperimentKind::FslaRun | ExperimentKind::CleanBench) && self.methods.is_empty() {
            return Err(invalid("methods", "a solver experiment needs at least one method"));
        }

        let o = &self.oracle_check;
        for (i, p) in o.problems.iter().enumerate() {
            if !CHECKABLE_PROBLEMS.contains(&p.as_str()) {
                return Err(invalid(
                    format!("oracle_check.problems[{i}]"),
                    format!("unknown problem `{p}`, expected one of {CHECKABLE_PROBLEMS:?}"),
                ));
            }
        }
        positive_count("oracle_check.points", o.points)?;
        positive("oracle_check.h", o.h)?;
        positive("oracle_check.tol", o.tol)?;
        Ok(())
    }

    /// Rejects a config written for a different command.
    pub fn expect_kind(&self, kind: ExperimentKind) -> Result<(), ConfigError> {
        if self.experiment != kind {
            return Err(ConfigError::KindMismatch {
                expected: kind,
                found: self.experiment,
            });
        }
        Ok(())
    }
}

fn default_methods(kind: ExperimentKind) -> Vec<MethodConfig> {
    match kind {
        ExperimentKind::FslaRun => vec![MethodConfig::fsla()],
        ExperimentKind::CleanBench => vec![
            MethodConfig::fsla(),
            MethodConfig::baseline(MethodKind::Ns, 1, 10),
            MethodConfig::baseline(MethodKind::Cg, 1, 10),
        ],
        _ => Vec::new(),
    }
}

fn positive_count(key: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        return Err(invalid(key, "must be at least 1"));
    }
    Ok(())
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(invalid(key, format!("must be positive and finite, got {v}")));
    }
    Ok(())
}
