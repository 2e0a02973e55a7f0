//! Finite CMDPs: the dense [`TabularCmdp`] and a slippery gridworld built
//! on top of it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CmdpSpec, Environment, Transition};
use crate::error::{Error, Result};

/// Exact finite CMDP with state-action rewards and state costs.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCmdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// Flat `[s][a][s']` transition probabilities.
    transitions: Vec<f64>,
    /// Flat `[s][a]` rewards.
    rewards: Vec<f64>,
    /// `costs[i][s]` for constraint `i`.
    pub costs: Vec<Vec<f64>>,
    pub start: usize,
    pub gamma: f64,
    pub thresholds: Vec<f64>,
}

impl TabularCmdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        costs: Vec<Vec<f64>>,
        start: usize,
        gamma: f64,
        thresholds: Vec<f64>,
    ) -> Result<Self> {
        let n = num_states;
        let k = num_actions;
        if n == 0 || k == 0 {
            return Err(Error::InvalidInput("empty state or action set".into()));
        }
        if transitions.len() != n * k * n || rewards.len() != n * k {
            return Err(Error::InvalidInput("tensor shapes do not match (n, k)".into()));
        }
        if costs.is_empty() || costs.iter().any(|c| c.len() != n) || costs.len() != thresholds.len() {
            return Err(Error::InvalidInput("cost vectors must have length n, one per threshold".into()));
        }
        if start >= n {
            return Err(Error::InvalidInput("start state out of range".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidInput(format!("discount {gamma} not in (0,1)")));
        }
        let cmdp = TabularCmdp {
            num_states,
            num_actions,
            transitions,
            rewards,
            costs,
            start,
            gamma,
            thresholds,
        };
        for s in 0..n {
            for a in 0..k {
                let row = cmdp.row(s, a);
                if row.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::InvalidInput(format!("negative probability in P[{s}][{a}]")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!("P[{s}][{a}] sums to {sum}")));
                }
            }
        }
        Ok(cmdp)
    }

    pub fn num_constraints(&self) -> usize {
        self.costs.len()
    }

    /// Next-state distribution `P[s][a][·]`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let off = (s * self.num_actions + a) * n;
        &self.transitions[off..off + n]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }

    pub fn cost(&self, constraint: usize, s: usize) -> f64 {
        self.costs[constraint][s]
    }

    /// Samples a successor of `(s, a)`.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = self.row(s, a);
        for (next, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return next;
            }
        }
        // Rounding can leave `acc` a hair under 1.
        row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// Unit moves: up, down, left, right as `(dx, dy)`.
pub const GRID_ACTIONS: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldConfig {
    pub width: usize,
    pub height: usize,
    /// `(x, y)` cells with unit cost.
    #[serde(default)]
    pub hazards: Vec<(usize, usize)>,
    pub goal: (usize, usize),
    #[serde(default)]
    pub start: (usize, usize),
    pub gamma: f64,
    pub threshold: f64,
    pub slip_prob: f64,
}

impl GridworldConfig {
    pub fn index(&self, cell: (usize, usize)) -> usize {
        cell.1 * self.width + cell.0
    }
}

/// Builds the 4-action gridworld: reward 1 in the goal cell, cost 1 in
/// hazard cells, intended move with probability `1 - slip_prob`, otherwise
/// uniform over the other three moves. Moves off the grid stay in place.
pub fn build_gridworld(cfg: &GridworldConfig) -> Result<TabularCmdp> {
    let (w, h) = (cfg.width, cfg.height);
    if w < 2 || h < 2 {
        return Err(Error::InvalidInput("gridworld dimensions must be >= 2".into()));
    }
    if !(0.0..1.0).contains(&cfg.slip_prob) {
        return Err(Error::InvalidInput("slip_prob must be in [0,1)".into()));
    }
    let in_range = |c: &(usize, usize)| c.0 < w && c.1 < h;
    if !in_range(&cfg.goal) || !in_range(&cfg.start) || !cfg.hazards.iter().all(in_range) {
        return Err(Error::InvalidInput("cell out of range".into()));
    }
    let n = w * h;
    let k = GRID_ACTIONS.len();
    let mut transitions = vec![0.0; n * k * n];
    let mut rewards = vec![0.0; n * k];
    let mut cost = vec![0.0; n];
    let goal = cfg.index(cfg.goal);
    for hz in &cfg.hazards {
        cost[cfg.index(*hz)] = 1.0;
    }
    let target = |x: usize, y: usize, dir: usize| -> usize {
        let (dx, dy) = GRID_ACTIONS[dir];
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
            y * w + x
        } else {
            ny as usize * w + nx as usize
        }
    };
    for y in 0..h {
        for x in 0..w {
            let s = y * w + x;
            for a in 0..k {
                if s == goal {
                    rewards[s * k + a] = 1.0;
                }
                let base = (s * k + a) * n;
                for dir in 0..k {
                    let p = if dir == a {
                        1.0 - cfg.slip_prob
                    } else {
                        cfg.slip_prob / (k - 1) as f64
                    };
                    transitions[base + target(x, y, dir)] += p;
                }
            }
        }
    }
    TabularCmdp::new(n, k, transitions, rewards, vec![cost], cfg.index(cfg.start), cfg.gamma, vec![cfg.threshold])
}

/// Continuous-interface wrapper over a gridworld: states are one-hot
/// vectors, actions are 2-vectors in `[-1, 1]²` mapped to the dominant axis
/// direction. Reward and cost are those of the pre-transition cell.
#[derive(Debug, Clone)]
pub struct GridworldEnv {
    pub cmdp: TabularCmdp,
    spec: CmdpSpec,
}

impl GridworldEnv {
    pub fn new(cfg: &GridworldConfig, horizon: usize) -> Result<Self> {
        let cmdp = build_gridworld(cfg)?;
        let spec = CmdpSpec {
            state_dim: cmdp.num_states,
            action_dim: 2,
            action_low: vec![-1.0; 2],
            action_high: vec![1.0; 2],
            horizon,
            gamma: cmdp.gamma,
            thresholds: cmdp.thresholds.clone(),
        };
        spec.validate()?;
        Ok(GridworldEnv { cmdp, spec })
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.cmdp.num_states];
        v[s] = 1.0;
        v
    }

    /// Index of the largest component of a one-hot state.
    pub fn state_index(&self, state: &[f64]) -> Result<usize> {
        if state.len() != self.cmdp.num_states {
            return Err(Error::InvalidInput("state is not a one-hot grid vector".into()));
        }
        Ok(state
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
            .0)
    }

    /// Dominant axis of a continuous action, as an index into [`GRID_ACTIONS`].
    pub fn discretize(action: &[f64]) -> usize {
        let (ax, ay) = (action[0], action[1]);
        if ax.abs() >= ay.abs() {
            if ax >= 0.0 {
                3
            } else {
                2
            }
        } else if ay >= 0.0 {
            1
        } else {
            0
        }
    }
}

impl Environment for GridworldEnv {
    fn spec(&self) -> &CmdpSpec {
        &self.spec
    }

    fn initial_state(&self) -> Vec<f64> {
        self.one_hot(self.cmdp.start)
    }

    fn step<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<Transition> {
        crate::error::ensure_finite(action, "action")?;
        let s = self.state_index(state)?;
        let a = Self::discretize(action);
        let next = self.cmdp.sample_next(s, a, rng);
        Ok(Transition {
            next_state: self.one_hot(next),
            reward: self.cmdp.reward(s, a),
            costs: (0..self.cmdp.num_constraints()).map(|i| self.cmdp.cost(i, s)).collect(),
        })
    }
}
