//! The per-epoch training loop and safe initialization.

use std::path::{Path, PathBuf};

use rand::Rng;

use super::config::{Algo, EnvConfig, ExperimentConfig};
use super::metrics::{MetricsRow, MetricsWriter};
use crate::cmdp::{rollout_with_streams, CmdpSpec, DidacticEnv, Environment, GridworldEnv, Signal, TimeAware, Trajectory, Transition};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::func_approx::{DeterministicPolicy, QFunction};
use crate::policy_eval::{constraint_budget, estimate_policy_cost, fit_q, q_inputs, td_lambda_targets, ConstraintBudget};
use crate::rng::{derive, Stream};
use crate::safe_update::{backtrack_update, cost_update, lbpo_update, reward_update, UpdateReport};

/// Any environment a config can name.
#[derive(Debug, Clone)]
pub enum EnvInstance {
    Didactic(DidacticEnv),
    Gridworld(GridworldEnv),
    Timed(Box<TimeAware<EnvInstance>>),
}

impl EnvInstance {
    /// The environment named by `cfg`, with the time feature when enabled.
    pub fn for_experiment(cfg: &ExperimentConfig) -> Result<Self> {
        let env = Self::build(&cfg.env)?;
        Ok(if cfg.uses_time_feature() {
            EnvInstance::Timed(Box::new(TimeAware::new(env)))
        } else {
            env
        })
    }

    pub fn build(cfg: &EnvConfig) -> Result<Self> {
        Ok(match cfg {
            EnvConfig::Didactic(p) => {
                let env = DidacticEnv::from(p.clone());
                env.spec().validate()?;
                if !(env.noise_std >= 0.0 && env.action_bound > 0.0) {
                    return Err(Error::Config("didactic noise_std must be >= 0 and action_bound > 0".into()));
                }
                EnvInstance::Didactic(env)
            }
            EnvConfig::Gridworld(p) => EnvInstance::Gridworld(GridworldEnv::new(&p.layout(), p.horizon)?),
        })
    }
}

impl Environment for EnvInstance {
    fn spec(&self) -> &CmdpSpec {
        match self {
            EnvInstance::Didactic(e) => e.spec(),
            EnvInstance::Gridworld(e) => e.spec(),
            EnvInstance::Timed(e) => e.spec(),
        }
    }

    fn initial_state(&self) -> Vec<f64> {
        match self {
            EnvInstance::Didactic(e) => e.initial_state(),
            EnvInstance::Gridworld(e) => e.initial_state(),
            EnvInstance::Timed(e) => e.initial_state(),
        }
    }

    fn step<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<Transition> {
        match self {
            EnvInstance::Didactic(e) => e.step(state, action, rng),
            EnvInstance::Gridworld(e) => e.step(state, action, rng),
            EnvInstance::Timed(e) => e.step(state, action, rng),
        }
    }
}

/// Which phase a batch of trajectories belongs to; selects the random
/// streams so that phases never share noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SafeInit,
    Train,
}

/// Collects `n` trajectories. Trajectory `j` of epoch `epoch` draws from
/// its own environment and exploration streams, so the batch is identical
/// under any execution mode and its first `k` members do not depend on `n`.
#[allow(clippy::too_many_arguments)]
pub fn collect_trajectories<E: Environment>(
    env: &E,
    policy: &DeterministicPolicy,
    exploration_std: f64,
    n: usize,
    seed: u64,
    phase: Phase,
    epoch: usize,
    exec: Execution,
) -> Result<Vec<Trajectory>> {
    let horizon = env.spec().horizon;
    exec.map_indexed(n, |j| {
        let (mut env_rng, mut explore_rng) = match phase {
            Phase::Train => (
                derive(seed, Stream::EnvNoise, epoch as u64, j as u64),
                derive(seed, Stream::Exploration, epoch as u64, j as u64),
            ),
            Phase::SafeInit => (
                derive(seed, Stream::SafeInit, epoch as u64, 2 * j as u64),
                derive(seed, Stream::SafeInit, epoch as u64, 2 * j as u64 + 1),
            ),
        };
        rollout_with_streams(env, policy, exploration_std, horizon, &mut env_rng, &mut explore_rng)
    })
    .into_iter()
    .collect()
}

/// Policy plus one Q-function for reward and one per constraint.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: DeterministicPolicy,
    pub qr: QFunction,
    pub qcs: Vec<QFunction>,
}

impl Learner {
    pub fn init(spec: &CmdpSpec, cfg: &ExperimentConfig) -> Result<Self> {
        let policy = DeterministicPolicy::init(
            spec.state_dim,
            &cfg.policy_hidden,
            spec.action_low.clone(),
            spec.action_high.clone(),
            &mut derive(cfg.seed, Stream::Init, 0, 0),
        )?;
        let q = |k: u64| QFunction::init(spec.state_dim, spec.action_dim, &cfg.q_hidden, &mut derive(cfg.seed, Stream::Init, 1 + k, 0));
        let qr = q(0)?;
        let qcs = (0..spec.num_constraints()).map(|i| q(1 + i as u64)).collect::<Result<_>>()?;
        Ok(Learner { policy, qr, qcs })
    }

    /// Refits the Q-functions named by `signals` on TD(λ) targets from
    /// `trajectories`; `stream` and `epoch` select the shuffling streams.
    fn fit(&mut self, trajectories: &[Trajectory], signals: &[Signal], cfg: &ExperimentConfig, stream: Stream, epoch: usize, exec: Execution) -> Result<()> {
        let inputs = q_inputs(trajectories);
        let fits = exec.map(signals, |sig| -> Result<QFunction> {
            let (q, k) = match *sig {
                Signal::Reward => (&self.qr, 0),
                Signal::Cost(i) => (&self.qcs[i], 1 + i as u64),
            };
            let targets = td_lambda_targets(trajectories, q, &self.policy, cfg.td(), *sig, Execution::Sequential)?.flatten();
            let mut rng = derive(cfg.seed, stream, epoch as u64, 1 << 32 | k);
            Ok(fit_q(q, &inputs, &targets, cfg.fit(), &mut rng)?.0)
        });
        for (sig, q) in signals.iter().zip(fits) {
            let q = q?;
            match *sig {
                Signal::Reward => self.qr = q,
                Signal::Cost(i) => self.qcs[i] = q,
            }
        }
        Ok(())
    }
}

fn measure(trajectories: &[Trajectory], spec: &CmdpSpec) -> Result<ConstraintBudget> {
    let measured = (0..spec.num_constraints())
        .map(|i| estimate_policy_cost(trajectories, spec.gamma, i))
        .collect::<Result<Vec<_>>>()?;
    constraint_budget(&spec.thresholds, &measured, spec.gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafeInitReport {
    /// Cost-minimizing updates performed before the policy measured safe.
    pub iterations: usize,
    pub measured: Vec<f64>,
}

/// Drives a freshly initialized learner to a policy whose measured
/// discounted cost is strictly below every threshold, by trust-region
/// steps on the most violated constraint's cost.
///
/// Fails with [`Error::InitializationFailure`] after
/// `cfg.safe_init_max_iters` updates.
pub fn safe_initialize<E: Environment>(env: &E, learner: &mut Learner, cfg: &ExperimentConfig, exec: Execution) -> Result<SafeInitReport> {
    let spec = env.spec();
    let tr = cfg.trust_region();
    let signals: Vec<Signal> = (0..spec.num_constraints()).map(Signal::Cost).collect();
    for iteration in 0..=cfg.safe_init_max_iters {
        let trajs = collect_trajectories(env, &learner.policy, cfg.delta, cfg.trajectories_per_epoch, cfg.seed, Phase::SafeInit, iteration, exec)?;
        let budget = measure(&trajs, spec)?;
        let worst = budget
            .measured
            .iter()
            .zip(&budget.thresholds)
            .enumerate()
            .filter(|(_, (d, d0))| d >= d0)
            .max_by(|a, b| {
                let r = |(d, d0): (&f64, &f64)| (d - d0) / d0.max(1e-12);
                r(a.1).total_cmp(&r(b.1)).then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i);
        let Some(j) = worst else {
            return Ok(SafeInitReport {
                iterations: iteration,
                measured: budget.measured,
            });
        };
        if iteration == cfg.safe_init_max_iters {
            return Err(Error::InitializationFailure {
                iterations: iteration,
                measured: budget.measured[j],
                threshold: budget.thresholds[j],
            });
        }
        learner.fit(&trajs, &signals, cfg, Stream::SafeInit, iteration, exec)?;
        let (policy, _) = cost_update(&learner.policy, &trajs, &learner.qcs[j], &tr, exec)?;
        learner.policy = policy;
    }
    unreachable!("loop returns on its final iteration")
}

/// Runs one epoch: collect, measure, refit, update. Returns the row and the
/// update report.
pub fn train_epoch<E: Environment>(env: &E, learner: &mut Learner, cfg: &ExperimentConfig, epoch: usize, exec: Execution) -> Result<(MetricsRow, UpdateReport)> {
    let spec = env.spec();
    let m = spec.num_constraints();
    let trajs = collect_trajectories(env, &learner.policy, cfg.delta, cfg.trajectories_per_epoch, cfg.seed, Phase::Train, epoch, exec)?;
    let budget = measure(&trajs, spec)?;
    let n = trajs.len() as f64;
    let undiscounted_return = trajs.iter().map(|t| t.rewards.iter().sum::<f64>()).sum::<f64>() / n;
    let undiscounted_cost = (0..m).map(|i| trajs.iter().map(|t| t.costs[i].iter().sum::<f64>()).sum::<f64>() / n).collect();

    let signals: Vec<Signal> = std::iter::once(Signal::Reward).chain((0..m).map(Signal::Cost)).collect();
    learner.fit(&trajs, &signals, cfg, Stream::QFit, epoch, exec)?;
    let tr = cfg.trust_region();
    let (policy, report) = match cfg.algo {
        Algo::Lbpo => lbpo_update(&learner.policy, &trajs, &learner.qr, &learner.qcs, &budget, &cfg.barrier(), &tr, exec)?,
        Algo::Backtrack => backtrack_update(&learner.policy, &trajs, &learner.qr, &learner.qcs, &budget, &tr, exec)?,
        Algo::Unconstrained => reward_update(&learner.policy, &trajs, &learner.qr, &learner.qcs, &budget, &tr, exec)?,
    };
    learner.policy = policy;
    let row = MetricsRow {
        epoch,
        undiscounted_return,
        undiscounted_cost,
        violated: budget.measured.iter().zip(&budget.thresholds).any(|(d, d0)| d > d0),
        discounted_cost: budget.measured,
        epsilon: budget.epsilon,
        kl_after: report.kl_after,
        linesearch_steps: report.linesearch_steps,
        backtracked: report.backtracked,
    };
    Ok((row, report))
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub rows: Vec<MetricsRow>,
    pub reports: Vec<UpdateReport>,
    pub safe_init: SafeInitReport,
    pub initial_policy: DeterministicPolicy,
    pub final_policy: DeterministicPolicy,
}

/// File names used inside a run's output directory.
pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

pub fn snapshot_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("policy_epoch_{epoch:04}.bin"))
}

/// Safe initialization followed by `cfg.epochs` epochs. With an output
/// directory, the metrics CSV is flushed after every epoch and policy
/// snapshots are written at epoch 0 and every `cfg.snapshot_every` epochs.
pub fn run_training(cfg: &ExperimentConfig, exec: Execution) -> Result<TrainingRun> {
    cfg.validate()?;
    let env = EnvInstance::for_experiment(cfg)?;
    let mut learner = Learner::init(env.spec(), cfg)?;
    let safe_init = safe_initialize(&env, &mut learner, cfg, exec)?;
    let initial_policy = learner.policy.clone();

    let mut writer = match &cfg.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            initial_policy.net.save(&snapshot_path(dir, 0))?;
            Some(MetricsWriter::create(&metrics_path(dir))?)
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (row, report) = train_epoch(&env, &mut learner, cfg, epoch, exec)?;
        if let Some(w) = writer.as_mut() {
            w.write(&row)?;
        }
        if let Some(dir) = &cfg.out {
            if (epoch + 1) % cfg.snapshot_every == 0 {
                learner.policy.net.save(&snapshot_path(dir, epoch + 1))?;
            }
        }
        rows.push(row);
        reports.push(report);
    }
    Ok(TrainingRun {
        rows,
        reports,
        safe_init,
        initial_policy,
        final_policy: learner.policy,
    })
}
