//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmdp::{DidacticParams, GridworldConfig};
use crate::error::{Error, Result};
use crate::policy_eval::{FitConfig, TdConfig};
use crate::safe_update::{BarrierConfig, TrustRegionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    #[default]
    Lbpo,
    Backtrack,
    Unconstrained,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Lbpo => "lbpo",
            Algo::Backtrack => "backtrack",
            Algo::Unconstrained => "unconstrained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lbpo" => Ok(Algo::Lbpo),
            "backtrack" => Ok(Algo::Backtrack),
            "unconstrained" => Ok(Algo::Unconstrained),
            _ => Err(Error::Config(format!("unknown algo `{s}` (expected lbpo, backtrack or unconstrained)"))),
        }
    }
}

/// Gridworld layout plus episode length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridworldParams {
    pub width: usize,
    pub height: usize,
    pub hazards: Vec<(usize, usize)>,
    pub goal: (usize, usize),
    pub start: (usize, usize),
    pub gamma: f64,
    pub threshold: f64,
    pub slip_prob: f64,
    pub horizon: usize,
}

impl Default for GridworldParams {
    fn default() -> Self {
        GridworldParams {
            width: 5,
            height: 5,
            hazards: vec![(1, 1), (2, 2), (3, 3), (1, 3)],
            goal: (4, 4),
            start: (0, 0),
            gamma: 0.95,
            threshold: 1.0,
            slip_prob: 0.1,
            horizon: 30,
        }
    }
}

impl GridworldParams {
    pub fn layout(&self) -> GridworldConfig {
        GridworldConfig {
            width: self.width,
            height: self.height,
            hazards: self.hazards.clone(),
            goal: self.goal,
            start: self.start,
            gamma: self.gamma,
            threshold: self.threshold,
            slip_prob: self.slip_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvConfig {
    Didactic(DidacticParams),
    Gridworld(GridworldParams),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Didactic(DidacticParams::default())
    }
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Didactic(_) => "didactic",
            EnvConfig::Gridworld(_) => "gridworld",
        }
    }

    /// Default parameters for the named environment.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "didactic" => Ok(EnvConfig::Didactic(DidacticParams::default())),
            "gridworld" => Ok(EnvConfig::Gridworld(GridworldParams::default())),
            _ => Err(Error::Config(format!("unknown env `{name}` (expected didactic or gridworld)"))),
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            EnvConfig::Didactic(p) => p.gamma,
            EnvConfig::Gridworld(p) => p.gamma,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvConfig::Didactic(p) => p.horizon,
            EnvConfig::Gridworld(p) => p.horizon,
        }
    }
}

/// Everything a training run depends on. Serialized as a single JSON
/// object; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub algo: Algo,
    pub seed: u64,
    pub epochs: usize,
    pub trajectories_per_epoch: usize,
    /// TD(λ) mixing weight.
    pub lambda: f64,
    pub beta: f64,
    pub beta_thres: f64,
    pub literal_beta_thres_mode: bool,
    /// KL trust-region radius.
    pub mu: f64,
    /// Exploration noise std.
    pub delta: f64,
    pub damping: f64,
    pub cg_iters: usize,
    pub linesearch_decay: f64,
    pub max_linesearch: usize,
    pub q_learning_rate: f64,
    pub q_epochs: usize,
    pub q_batch_size: usize,
    pub policy_hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
    /// Bootstrap the TD(λ) tail at the last state. Unset: off for the
    /// didactic env, whose horizon is the true episode end; on for the
    /// gridworld, whose horizon truncates a continuing task.
    pub bootstrap_terminal: Option<bool>,
    /// Append the elapsed episode fraction to observations. Unset: on for
    /// the didactic env, off for the gridworld.
    pub time_feature: Option<bool>,
    pub safe_init_max_iters: usize,
    pub snapshot_every: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let tr = TrustRegionConfig::default();
        let fit = FitConfig::default();
        ExperimentConfig {
            env: EnvConfig::default(),
            algo: Algo::Lbpo,
            seed: 0,
            epochs: 100,
            trajectories_per_epoch: 30,
            lambda: 0.97,
            beta: 0.005,
            beta_thres: 0.05,
            literal_beta_thres_mode: false,
            mu: tr.mu,
            delta: tr.exploration_std,
            damping: tr.damping,
            cg_iters: tr.cg_iters,
            linesearch_decay: tr.decay,
            max_linesearch: tr.max_linesearch,
            q_learning_rate: fit.learning_rate,
            q_epochs: fit.epochs,
            q_batch_size: fit.batch_size,
            policy_hidden: vec![32, 32],
            q_hidden: vec![32, 32],
            bootstrap_terminal: None,
            time_feature: None,
            safe_init_max_iters: 200,
            snapshot_every: 10,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("delta", self.delta),
            ("linesearch_decay", self.linesearch_decay),
            ("q_learning_rate", self.q_learning_rate),
            ("gamma", self.env.gamma()),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonnegative = [("beta", self.beta), ("beta_thres", self.beta_thres), ("damping", self.damping)];
        for (name, v) in nonnegative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.lambda > 1.0 || self.linesearch_decay >= 1.0 || self.env.gamma() >= 1.0 {
            return Err(Error::Config("lambda must be <= 1; linesearch_decay and gamma must be < 1".into()));
        }
        let counts = [
            ("trajectories_per_epoch", self.trajectories_per_epoch),
            ("cg_iters", self.cg_iters),
            ("q_batch_size", self.q_batch_size),
            ("horizon", self.env.horizon()),
            ("snapshot_every", self.snapshot_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.policy_hidden.contains(&0) || self.q_hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn barrier(&self) -> BarrierConfig {
        BarrierConfig {
            beta: self.beta,
            beta_thres: self.beta_thres,
            literal_beta_thres_mode: self.literal_beta_thres_mode,
        }
    }

    pub fn trust_region(&self) -> TrustRegionConfig {
        TrustRegionConfig {
            mu: self.mu,
            cg_iters: self.cg_iters,
            cg_tol: 1e-8,
            damping: self.damping,
            decay: self.linesearch_decay,
            max_linesearch: self.max_linesearch,
            exploration_std: self.delta,
        }
    }

    pub fn fit(&self) -> FitConfig {
        FitConfig {
            learning_rate: self.q_learning_rate,
            epochs: self.q_epochs,
            batch_size: self.q_batch_size,
        }
    }

    pub fn uses_time_feature(&self) -> bool {
        self.time_feature.unwrap_or(matches!(self.env, EnvConfig::Didactic(_)))
    }

    pub fn td(&self) -> TdConfig {
        TdConfig {
            gamma: self.env.gamma(),
            lambda: self.lambda,
            bootstrap_terminal: self.bootstrap_terminal.unwrap_or(matches!(self.env, EnvConfig::Gridworld(_))),
        }
    }
}
