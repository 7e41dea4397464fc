//! Run configuration.
//!
//! One TOML file with nested sections; every key is optional and falls back
//! to the defaults below. Command-line overrides are applied as dotted keys
//! (`dropout.alpha = 0.3`) on top of the parsed file, so the precedence is
//! flags > file > defaults.
//!
//! The defaults are a desk-scale pendulum schedule. Reference MuJoCo-scale
//! values for comparison: 120–400 epochs of 1000 env steps, rollout batch
//! 1e5, 20–40 policy updates and 250 model updates per env step, α = β = 0.2,
//! γ = 0.99, 10 ensemble members of 4×200 MLPs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvKind;
use crate::rollout::DropoutMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid override `{0}` (expected section.key=value)")]
    Override(String),
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<String>),
}

/// Dropout ratios and the constants entering the discrepancy bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Supremum `R_m` of |r(s, a)|.
    pub reward_sup: f64,
}

impl DropoutConfig {
    pub fn new(alpha: f64, beta: f64, gamma: f64, reward_sup: f64) -> Result<Self, ConfigError> {
        let mut errors = Vec::new();
        if !(0.0..1.0).contains(&alpha) {
            errors.push(format!("dropout.alpha = {alpha}: must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&beta) {
            errors.push(format!("dropout.beta = {beta}: must lie in [0, 1)"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            errors.push(format!("dropout.gamma = {gamma}: must lie in (0, 1)"));
        }
        if !(reward_sup > 0.0 && reward_sup.is_finite()) {
            errors.push(format!("dropout.reward_sup = {reward_sup}: must be positive and finite"));
        }
        if errors.is_empty() {
            Ok(Self {
                alpha,
                beta,
                gamma,
                reward_sup,
            })
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// `pendulum`, `point-mass` or `cartpole`.
    pub env: String,
    pub seed: u64,
    pub epochs: usize,
    pub env_steps_per_epoch: usize,
    /// Uniform-random exploration steps before the actor takes over.
    pub random_steps: usize,
    pub eval_episodes: usize,
    /// Write checkpoints every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Perturbation of the training environment.
    pub c_mass: f64,
    pub c_friction: f64,
    /// Lipschitz constant K for the bound report; estimated from the critic
    /// when absent.
    pub lipschitz_k: Option<f64>,
    pub lipschitz_pairs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            env: "pendulum".into(),
            seed: 0,
            epochs: 40,
            env_steps_per_epoch: 200,
            random_steps: 400,
            eval_episodes: 10,
            checkpoint_every: 0,
            c_mass: 1.0,
            c_friction: 1.0,
            lipschitz_k: None,
            lipschitz_pairs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Defaults to the environment's declared reward bound.
    pub reward_sup: Option<f64>,
}

impl Default for DropoutSection {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.2,
            gamma: 0.99,
            reward_sup: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferSection {
    pub env_capacity: usize,
    pub model_capacity: usize,
}

impl Default for BufferSection {
    fn default() -> Self {
        Self {
            env_capacity: 100_000,
            model_capacity: 40_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    /// Inner model-train / rollout iterations per epoch.
    pub train_iters: usize,
    /// Gradient steps per member per inner iteration.
    pub train_steps: usize,
    pub validation_fraction: f64,
    pub max_validation: usize,
    pub min_transitions: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            ensemble_size: 5,
            hidden: vec![64, 64],
            lr: 1e-3,
            batch_size: 64,
            train_iters: 1,
            train_steps: 1000,
            validation_fraction: 0.2,
            max_validation: 1000,
            min_transitions: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub starts: usize,
    pub rollouts_per_start: usize,
    pub horizon: usize,
    pub min_group_size: usize,
    pub mode: DropoutMode,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            starts: 100,
            rollouts_per_start: 8,
            horizon: 3,
            min_group_size: 5,
            mode: DropoutMode::PerSample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub updates_per_env_step: usize,
    pub entropy_weight: f64,
    /// Target-critic EMA coefficient.
    pub tau: f64,
    pub grad_clip: f64,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            batch_size: 64,
            updates_per_env_step: 5,
            entropy_weight: 0.01,
            tau: 0.01,
            grad_clip: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run: RunSection,
    pub dropout: DropoutSection,
    pub buffers: BufferSection,
    pub model: ModelSection,
    pub rollout: RolloutSection,
    pub agent: AgentSection,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    /// Parse `path` (or start from defaults), apply `section.key=value`
    /// overrides and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| ConfigError::Parse(e.to_string()))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn env_kind(&self) -> Result<EnvKind, ConfigError> {
        EnvKind::from_name(&self.run.env).map_err(|e| ConfigError::Invalid(vec![format!("run.env: {e}")]))
    }

    pub fn dropout_config(&self) -> Result<DropoutConfig, ConfigError> {
        let reward_sup = match self.dropout.reward_sup {
            Some(r) => r,
            None => self.env_kind()?.reward_sup(),
        };
        DropoutConfig::new(self.dropout.alpha, self.dropout.beta, self.dropout.gamma, reward_sup)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        if let Err(e) = self.env_kind() {
            errors.push(e.to_string());
        }
        if let Err(ConfigError::Invalid(mut es)) = self.dropout_config() {
            errors.append(&mut es);
        }
        let r = &self.run;
        for (name, v) in [("run.c_mass", r.c_mass), ("run.c_friction", r.c_friction)] {
            if !(0.5..=1.5).contains(&v) {
                errors.push(format!("{name} = {v}: must lie in [0.5, 1.5]"));
            }
        }
        if r.eval_episodes == 0 {
            errors.push("run.eval_episodes must be at least 1".into());
        }
        if let Some(k) = r.lipschitz_k {
            if !(k >= 0.0 && k.is_finite()) {
                errors.push(format!("run.lipschitz_k = {k}: must be finite and nonnegative"));
            }
        }
        if r.lipschitz_pairs == 0 {
            errors.push("run.lipschitz_pairs must be positive".into());
        }
        let b = &self.buffers;
        if b.env_capacity == 0 || b.model_capacity == 0 {
            errors.push("buffers: capacities must be positive".into());
        }
        let m = &self.model;
        if m.ensemble_size == 0 {
            errors.push("model.ensemble_size must be at least 1".into());
        }
        if m.hidden.contains(&0) {
            errors.push("model.hidden widths must be positive".into());
        }
        if !(m.lr > 0.0) {
            errors.push(format!("model.lr = {}: must be positive", m.lr));
        }
        if m.batch_size == 0 {
            errors.push("model.batch_size must be positive".into());
        }
        if !(m.validation_fraction > 0.0 && m.validation_fraction < 1.0) {
            errors.push(format!(
                "model.validation_fraction = {}: must lie in (0, 1)",
                m.validation_fraction
            ));
        }
        if m.max_validation == 0 {
            errors.push("model.max_validation must be positive".into());
        }
        if m.min_transitions < 2 {
            errors.push("model.min_transitions must be at least 2".into());
        }
        let ro = &self.rollout;
        if ro.starts == 0 || ro.rollouts_per_start == 0 || ro.horizon == 0 {
            errors.push("rollout: starts, rollouts_per_start and horizon must be positive".into());
        }
        let a = &self.agent;
        if a.hidden.contains(&0) {
            errors.push("agent.hidden widths must be positive".into());
        }
        if !(a.actor_lr > 0.0 && a.critic_lr > 0.0) {
            errors.push("agent learning rates must be positive".into());
        }
        if a.batch_size == 0 {
            errors.push("agent.batch_size must be positive".into());
        }
        if !(a.entropy_weight >= 0.0) {
            errors.push(format!("agent.entropy_weight = {}: must be nonnegative", a.entropy_weight));
        }
        if !(a.tau > 0.0 && a.tau <= 1.0) {
            errors.push(format!("agent.tau = {}: must lie in (0, 1]", a.tau));
        }
        if !(a.grad_clip > 0.0) {
            errors.push(format!("agent.grad_clip = {}: must be positive", a.grad_clip));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }
}

/// Set one dotted key. The value is parsed as a TOML value when possible
/// and kept as a string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let section = table
        .entry(path[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match section {
        toml::Value::Table(t) => {
            t.insert(path[1].to_string(), value);
            Ok(())
        }
        _ => Err(ConfigError::Override(assignment.to_string())),
    }
}
