//! Constrained MDP abstractions: environment trait, trajectories, rollouts.

mod didactic;
mod gridworld;

pub use didactic::{didactic_step, didactic_step_with_noise, DidacticEnv, DidacticParams};
pub use gridworld::{build_gridworld, GridworldConfig, GridworldEnv, TabularCmdp, GRID_ACTIONS};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Which per-step signal a value function tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signal {
    Reward,
    Cost(usize),
}

/// Static description of a CMDP with continuous state/action vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
    pub gamma: f64,
    /// Per-constraint thresholds `d0`, one entry per constraint.
    pub thresholds: Vec<f64>,
}

impl CmdpSpec {
    pub fn num_constraints(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidInput(format!("discount {} not in (0,1)", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        if self.thresholds.is_empty() {
            return Err(Error::InvalidInput("at least one constraint required".into()));
        }
        if self.thresholds.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidInput("thresholds must be non-negative".into()));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::InvalidInput("action bounds do not match action_dim".into()));
        }
        if self.action_low.iter().zip(&self.action_high).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidInput("action_low must be < action_high".into()));
        }
        Ok(())
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub costs: Vec<f64>,
}

pub trait Environment: Sync {
    fn spec(&self) -> &CmdpSpec;

    fn initial_state(&self) -> Vec<f64>;

    /// Advances one step. Out-of-bounds actions are clipped, not rejected.
    fn step<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<Transition>;
}

/// Appends the elapsed fraction of the episode `t / horizon` to every
/// observation. In a finite-horizon episode the remaining return depends on
/// `t`; without it a value function of the raw state averages over time
/// and its action gradient can point the wrong way.
#[derive(Debug, Clone)]
pub struct TimeAware<E> {
    pub inner: E,
    spec: CmdpSpec,
}

impl<E: Environment> TimeAware<E> {
    pub fn new(inner: E) -> Self {
        let mut spec = inner.spec().clone();
        spec.state_dim += 1;
        TimeAware { inner, spec }
    }

    fn split<'s>(&self, state: &'s [f64]) -> Result<(&'s [f64], usize)> {
        let Some((tau, raw)) = state.split_last() else {
            return Err(Error::InvalidInput("empty time-aware state".into()));
        };
        if raw.len() != self.inner.spec().state_dim || !tau.is_finite() {
            return Err(Error::InvalidInput("state lacks a time component".into()));
        }
        Ok((raw, (tau * self.spec.horizon as f64).round().max(0.0) as usize))
    }

    fn with_time(&self, mut raw: Vec<f64>, t: usize) -> Vec<f64> {
        raw.push(t as f64 / self.spec.horizon as f64);
        raw
    }
}

impl<E: Environment> Environment for TimeAware<E> {
    fn spec(&self) -> &CmdpSpec {
        &self.spec
    }

    fn initial_state(&self) -> Vec<f64> {
        self.with_time(self.inner.initial_state(), 0)
    }

    fn step<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<Transition> {
        let (raw, t) = self.split(state)?;
        let tr = self.inner.step(raw, action, rng)?;
        Ok(Transition {
            next_state: self.with_time(tr.next_state, t + 1),
            ..tr
        })
    }
}

/// Anything mapping a state vector to an action mean.
pub trait ActionMap: Sync {
    fn action(&self, state: &[f64]) -> Vec<f64>;
}

impl<F> ActionMap for F
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn action(&self, state: &[f64]) -> Vec<f64> {
        self(state)
    }
}

/// One episode. `states` has `horizon + 1` entries, every other sequence
/// has `horizon`; `costs[i]` is the cost sequence of constraint `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions_mean: Vec<Vec<f64>>,
    pub actions_exec: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub costs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    /// States at which actions were taken (`s_0 .. s_{H-1}`).
    pub fn decision_states(&self) -> &[Vec<f64>] {
        &self.states[..self.horizon()]
    }

    pub fn signal(&self, signal: Signal) -> &[f64] {
        match signal {
            Signal::Reward => &self.rewards,
            Signal::Cost(i) => &self.costs[i],
        }
    }
}

/// Collects one episode using a single random source for both environment
/// and exploration noise.
pub fn rollout<E, P, R>(env: &E, policy: &P, exploration_std: f64, horizon: usize, rng: &mut R) -> Result<Trajectory>
where
    E: Environment,
    P: ActionMap + ?Sized,
    R: Rng + ?Sized,
{
    collect(env, policy, exploration_std, horizon, &mut SingleStream(rng))
}

/// Like [`rollout`] but with separate random streams for environment noise
/// and exploration noise.
pub fn rollout_with_streams<E, P, R>(
    env: &E,
    policy: &P,
    exploration_std: f64,
    horizon: usize,
    env_rng: &mut R,
    explore_rng: &mut R,
) -> Result<Trajectory>
where
    E: Environment,
    P: ActionMap + ?Sized,
    R: Rng + ?Sized,
{
    collect(
        env,
        policy,
        exploration_std,
        horizon,
        &mut SplitStreams {
            env: env_rng,
            explore: explore_rng,
        },
    )
}

trait NoiseSources {
    fn exploration(&mut self) -> f64;
    fn step<E: Environment>(&mut self, env: &E, state: &[f64], action: &[f64]) -> Result<Transition>;
}

struct SingleStream<'a, R: ?Sized>(&'a mut R);

impl<R: Rng + ?Sized> NoiseSources for SingleStream<'_, R> {
    fn exploration(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    fn step<E: Environment>(&mut self, env: &E, state: &[f64], action: &[f64]) -> Result<Transition> {
        env.step(state, action, self.0)
    }
}

struct SplitStreams<'a, R: ?Sized> {
    env: &'a mut R,
    explore: &'a mut R,
}

impl<R: Rng + ?Sized> NoiseSources for SplitStreams<'_, R> {
    fn exploration(&mut self) -> f64 {
        self.explore.sample(StandardNormal)
    }

    fn step<E: Environment>(&mut self, env: &E, state: &[f64], action: &[f64]) -> Result<Transition> {
        env.step(state, action, self.env)
    }
}

fn collect<E, P, N>(env: &E, policy: &P, exploration_std: f64, horizon: usize, noise: &mut N) -> Result<Trajectory>
where
    E: Environment,
    P: ActionMap + ?Sized,
    N: NoiseSources,
{
    if !(exploration_std >= 0.0) {
        return Err(Error::InvalidInput("exploration std must be >= 0".into()));
    }
    let spec = env.spec();
    let m = spec.num_constraints();
    let mut traj = Trajectory {
        states: Vec::with_capacity(horizon + 1),
        actions_mean: Vec::with_capacity(horizon),
        actions_exec: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        costs: vec![Vec::with_capacity(horizon); m],
    };
    let mut state = env.initial_state();
    for _ in 0..horizon {
        let mean = policy.action(&state);
        let noisy: Vec<f64> = if exploration_std > 0.0 {
            mean.iter().map(|m| m + exploration_std * noise.exploration()).collect()
        } else {
            mean.clone()
        };
        let exec = spec.clip_action(&noisy);
        let tr = noise.step(env, &state, &exec)?;
        traj.states.push(std::mem::replace(&mut state, tr.next_state));
        traj.actions_mean.push(mean);
        traj.actions_exec.push(exec);
        traj.rewards.push(tr.reward);
        for (seq, c) in traj.costs.iter_mut().zip(&tr.costs) {
            seq.push(*c);
        }
    }
    traj.states.push(state);
    Ok(traj)
}

/// `Σ_t γ^t values_t`.
pub fn discounted_sum(values: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    for v in values.iter().rev() {
        acc = v + gamma * acc;
    }
    acc
}

/// Checked variant of [`discounted_sum`].
pub fn try_discounted_sum(values: &[f64], gamma: f64) -> Result<f64> {
    ensure_finite(values, "values")?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!("discount {gamma} not in [0,1]")));
    }
    Ok(discounted_sum(values, gamma))
}
