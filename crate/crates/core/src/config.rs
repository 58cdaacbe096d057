//! Run configuration. Files are flat `key = value` TOML; unknown keys are
//! rejected and every key has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::SizeClass;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub seed: u64,
    pub size_class: SizeClass,
    /// Fixed layout file; overrides generation when set.
    pub maze_file: Option<String>,
    /// Seed for maze generation; drawn from the env stream when unset.
    pub maze_seed: Option<u64>,
    /// Defaults to the size class limit (400 for S, 1000 for M).
    pub max_episode_steps: Option<usize>,
    pub total_env_steps: u64,

    /// K: steps per goal.
    pub goal_interval: usize,
    /// X: candidates per tree node.
    pub branching: usize,
    /// m: tree depth.
    pub depth: usize,
    /// C: abstract model update period.
    pub abstract_update_period: u64,
    pub primitive_update_period: u64,

    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub code_factors: usize,
    pub code_classes: usize,

    pub gamma: f64,
    pub lr_world_model: f64,
    pub lr_codec: f64,
    pub lr_abstract: f64,
    pub lr_manager: f64,
    pub lr_worker: f64,
    pub entropy_weight: f64,
    pub grad_clip: f64,

    /// H: imagined steps per policy update.
    pub imagination_horizon: usize,
    /// Imagined trajectories per policy update.
    pub imagination_batch: usize,
    pub sequence_batch: usize,
    pub sequence_length: usize,
    pub extended_batch: usize,
    pub primitive_capacity: usize,
    pub extended_capacity: usize,

    /// false gives the flat-manager baseline: one greedy manager goal, no tree.
    pub planner: bool,
    /// Completed episodes per metrics row.
    pub eval_every: usize,
    /// Wall-clock planner timing in the metrics (breaks byte-reproducibility).
    pub record_plan_time: bool,
    pub stop_at_first_success: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size_class: SizeClass::S,
            maze_file: None,
            maze_seed: None,
            max_episode_steps: None,
            total_env_steps: 100_000,
            goal_interval: 8,
            branching: 3,
            depth: 2,
            abstract_update_period: 16,
            primitive_update_period: 16,
            latent_dim: 32,
            hidden_dim: 64,
            code_factors: 4,
            code_classes: 8,
            gamma: 0.99,
            lr_world_model: 1e-3,
            lr_codec: 1e-3,
            lr_abstract: 1e-3,
            lr_manager: 1e-3,
            lr_worker: 1e-3,
            entropy_weight: 0.01,
            grad_clip: 100.0,
            imagination_horizon: 16,
            imagination_batch: 16,
            sequence_batch: 8,
            sequence_length: 16,
            extended_batch: 16,
            primitive_capacity: 100_000,
            extended_capacity: 20_000,
            planner: true,
            eval_every: 1,
            record_plan_time: false,
            stop_at_first_success: false,
        }
    }
}

impl AgentConfig {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: AgentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical text form; `parse(to_text())` gives back `self`.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn episode_limit(&self) -> usize {
        self.max_episode_steps
            .unwrap_or_else(|| self.size_class.max_episode_steps())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("goal_interval", self.goal_interval as u64),
            ("branching", self.branching as u64),
            ("depth", self.depth as u64),
            ("abstract_update_period", self.abstract_update_period),
            ("primitive_update_period", self.primitive_update_period),
            ("latent_dim", self.latent_dim as u64),
            ("hidden_dim", self.hidden_dim as u64),
            ("code_factors", self.code_factors as u64),
            ("code_classes", self.code_classes as u64),
            ("imagination_horizon", self.imagination_horizon as u64),
            ("imagination_batch", self.imagination_batch as u64),
            ("sequence_batch", self.sequence_batch as u64),
            ("sequence_length", self.sequence_length as u64),
            ("extended_batch", self.extended_batch as u64),
            ("primitive_capacity", self.primitive_capacity as u64),
            ("extended_capacity", self.extended_capacity as u64),
            ("eval_every", self.eval_every as u64),
            ("episode limit", self.episode_limit() as u64),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be at least 1")));
            }
        }
        if !self.imagination_horizon.is_multiple_of(self.goal_interval) {
            return Err(Error::Config(format!(
                "goal_interval ({}) must divide imagination_horizon ({})",
                self.goal_interval, self.imagination_horizon
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        for (key, v) in [
            ("lr_world_model", self.lr_world_model),
            ("lr_codec", self.lr_codec),
            ("lr_abstract", self.lr_abstract),
            ("lr_manager", self.lr_manager),
            ("lr_worker", self.lr_worker),
            ("entropy_weight", self.entropy_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{key} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Per-decision discount used to score plan paths.
    pub fn option_discount(&self) -> f64 {
        self.gamma.powi(self.goal_interval as i32)
    }
}
