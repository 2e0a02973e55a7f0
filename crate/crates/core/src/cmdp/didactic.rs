//! Two-dimensional point-mass CMDP whose reward and cost are both the
//! distance from the origin.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CmdpSpec, Environment, Transition};
use crate::error::{ensure_finite, Result};

/// Tunable constants of the didactic environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DidacticParams {
    pub noise_std: f64,
    pub action_bound: f64,
    pub horizon: usize,
    pub gamma: f64,
    pub threshold: f64,
}

impl Default for DidacticParams {
    fn default() -> Self {
        DidacticParams {
            noise_std: 0.1,
            action_bound: 0.2,
            horizon: 10,
            gamma: 0.99,
            threshold: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "DidacticParams", into = "DidacticParams")]
pub struct DidacticEnv {
    pub noise_std: f64,
    pub action_bound: f64,
    spec: CmdpSpec,
}

impl Default for DidacticEnv {
    fn default() -> Self {
        DidacticParams::default().into()
    }
}

impl From<DidacticParams> for DidacticEnv {
    fn from(p: DidacticParams) -> Self {
        DidacticEnv {
            noise_std: p.noise_std,
            action_bound: p.action_bound,
            spec: CmdpSpec {
                state_dim: 2,
                action_dim: 2,
                action_low: vec![-p.action_bound; 2],
                action_high: vec![p.action_bound; 2],
                horizon: p.horizon,
                gamma: p.gamma,
                thresholds: vec![p.threshold],
            },
        }
    }
}

impl From<DidacticEnv> for DidacticParams {
    fn from(e: DidacticEnv) -> Self {
        e.params()
    }
}

impl DidacticEnv {
    pub fn params(&self) -> DidacticParams {
        DidacticParams {
            noise_std: self.noise_std,
            action_bound: self.action_bound,
            horizon: self.spec.horizon,
            gamma: self.spec.gamma,
            threshold: self.spec.thresholds[0],
        }
    }

    fn edit(&self, f: impl FnOnce(&mut DidacticParams)) -> Self {
        let mut p = self.params();
        f(&mut p);
        p.into()
    }

    pub fn with_noise_std(self, std: f64) -> Self {
        self.edit(|p| p.noise_std = std)
    }

    pub fn with_threshold(self, d0: f64) -> Self {
        self.edit(|p| p.threshold = d0)
    }

    pub fn with_horizon(self, horizon: usize) -> Self {
        self.edit(|p| p.horizon = horizon)
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        self.edit(|p| p.gamma = gamma)
    }
}

/// Deterministic core of the transition: `next = state + clip(action) + noise`.
/// Reward and cost are evaluated at the post-transition state.
pub fn didactic_step_with_noise(
    state: &[f64],
    action: &[f64],
    noise: [f64; 2],
    action_bound: f64,
) -> Result<(Vec<f64>, f64, f64)> {
    if state.len() != 2 || action.len() != 2 {
        return Err(crate::Error::InvalidInput("didactic state and action are 2-vectors".into()));
    }
    ensure_finite(state, "state")?;
    ensure_finite(action, "action")?;
    let next: Vec<f64> = (0..2)
        .map(|i| state[i] + action[i].clamp(-action_bound, action_bound) + noise[i])
        .collect();
    let r = next[0].hypot(next[1]);
    Ok((next, r, r))
}

/// One stochastic transition with Gaussian noise of std `noise_std`.
pub fn didactic_step<R: Rng + ?Sized>(
    state: &[f64],
    action: &[f64],
    noise_std: f64,
    action_bound: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, f64, f64)> {
    let mut noise = [0.0; 2];
    if noise_std > 0.0 {
        for n in noise.iter_mut() {
            *n = noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    didactic_step_with_noise(state, action, noise, action_bound)
}

impl Environment for DidacticEnv {
    fn spec(&self) -> &CmdpSpec {
        &self.spec
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn step<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<Transition> {
        let (next_state, reward, cost) = didactic_step(state, action, self.noise_std, self.action_bound, rng)?;
        Ok(Transition {
            next_state,
            reward,
            costs: vec![cost],
        })
    }
}
