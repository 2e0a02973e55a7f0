//! On-policy evaluation: TD(λ) targets, Q regression, measured discounted
//! cost and the per-step constraint budget.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::cmdp::{discounted_sum, Signal, Trajectory};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::func_approx::{DeterministicPolicy, QFunction};

/// λ-return targets, `targets[j][t]` for trajectory `j`, step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaReturns {
    pub targets: Vec<Vec<f64>>,
}

impl LambdaReturns {
    pub fn flatten(&self) -> Vec<f64> {
        self.targets.iter().flatten().copied().collect()
    }
}

/// Backward λ-return recursion for one trajectory.
///
/// `next_values[t]` is the bootstrap value of `s_{t+1}`; the last entry is
/// the terminal bootstrap (pass 0 to cut the tail).
pub fn lambda_returns(signal: &[f64], next_values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    debug_assert_eq!(signal.len(), next_values.len());
    let h = signal.len();
    let mut out = vec![0.0; h];
    if h == 0 {
        return out;
    }
    // G_H is the terminal bootstrap itself.
    let mut next_return = next_values[h - 1];
    for t in (0..h).rev() {
        let g = signal[t] + gamma * ((1.0 - lambda) * next_values[t] + lambda * next_return);
        out[t] = g;
        next_return = g;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct TdConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Bootstrap the truncated tail with `Q(s_H, π(s_H))`; off gives plain
    /// Monte Carlo tails when `λ = 1`.
    pub bootstrap_terminal: bool,
}

pub fn td_lambda_targets(
    trajectories: &[Trajectory],
    q: &QFunction,
    policy: &DeterministicPolicy,
    cfg: TdConfig,
    signal: Signal,
    exec: Execution,
) -> Result<LambdaReturns> {
    if trajectories.is_empty() {
        return Err(Error::InvalidInput("no trajectories to evaluate".into()));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::InvalidInput(format!("lambda {} not in [0,1]", cfg.lambda)));
    }
    let per_traj = exec.map(trajectories, |traj| -> Result<Vec<f64>> {
        let h = traj.horizon();
        let mut next_values = Vec::with_capacity(h);
        for t in 0..h {
            let s = &traj.states[t + 1];
            let v = if t + 1 == h && !cfg.bootstrap_terminal {
                0.0
            } else {
                q.value(s, &policy.act(s)?)?
            };
            next_values.push(v);
        }
        Ok(lambda_returns(traj.signal(signal), &next_values, cfg.gamma, cfg.lambda))
    });
    Ok(LambdaReturns {
        targets: per_traj.into_iter().collect::<Result<_>>()?,
    })
}

/// `[s_t, a_t]` regression inputs (executed actions), in trajectory order.
pub fn q_inputs(trajectories: &[Trajectory]) -> Vec<Vec<f64>> {
    trajectories
        .iter()
        .flat_map(|tr| {
            tr.decision_states().iter().zip(&tr.actions_exec).map(|(s, a)| {
                let mut x = s.clone();
                x.extend_from_slice(a);
                x
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 256,
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn mean_squared_error(q: &QFunction, inputs: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let flat: Vec<f64> = inputs.concat();
    let trace = q.net.batch_trace(&flat, inputs.len())?;
    let total: f64 = trace.output().iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(total / inputs.len() as f64)
}

/// Mini-batch regression of `q` onto `targets` with Adam. Returns the
/// updated function and the final mean squared error over all inputs.
pub fn fit_q<R: Rng + ?Sized>(
    q: &QFunction,
    inputs: &[Vec<f64>],
    targets: &[f64],
    cfg: FitConfig,
    rng: &mut R,
) -> Result<(QFunction, f64)> {
    if inputs.len() != targets.len() {
        return Err(Error::InvalidInput("inputs and targets differ in length".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::InvalidInput("learning rate and batch size must be positive".into()));
    }
    let dim = q.net.input_dim();
    if inputs.iter().any(|x| x.len() != dim) {
        return Err(Error::InvalidInput(format!("every input must have length {dim}")));
    }
    let mut q = q.clone();
    let n = inputs.len();
    let mut opt = Adam::new(q.net.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; q.net.len()];
    let mut batch_inputs = Vec::with_capacity(cfg.batch_size.min(n) * dim);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            batch_inputs.clear();
            for &i in batch {
                batch_inputs.extend_from_slice(&inputs[i]);
            }
            let trace = q.net.batch_trace(&batch_inputs, batch.len())?;
            let scale = 2.0 / batch.len() as f64;
            let mut upstream = Vec::with_capacity(batch.len());
            for (p, &i) in trace.output().iter().zip(batch) {
                let err = p - targets[i];
                if !err.is_finite() {
                    return Err(Error::TrainingDivergence(err));
                }
                upstream.push(scale * err);
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            q.net.batch_backward(&trace, &upstream, &mut grad);
            opt.step(q.net.flat_mut(), &grad);
        }
    }
    let loss = mean_squared_error(&q, inputs, targets)?;
    if !loss.is_finite() {
        return Err(Error::TrainingDivergence(loss));
    }
    Ok((q, loss))
}

/// Mean discounted cost of constraint `constraint` over the trajectories.
pub fn estimate_policy_cost(trajectories: &[Trajectory], gamma: f64, constraint: usize) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::InvalidInput("no trajectories to measure".into()));
    }
    let total: f64 = trajectories
        .iter()
        .map(|t| discounted_sum(&t.costs[constraint], gamma))
        .sum();
    Ok(total / trajectories.len() as f64)
}

/// Per-constraint budget `ε̂ᵢ = (1−γ)(d0ᵢ − D̂ᵢ)` with its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBudget {
    pub epsilon: Vec<f64>,
    pub measured: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub gamma: f64,
}

impl ConstraintBudget {
    pub fn num_constraints(&self) -> usize {
        self.epsilon.len()
    }

    pub fn all_safe(&self) -> bool {
        self.epsilon.iter().all(|e| *e > 0.0)
    }

    /// Constraint with the largest threshold-normalized violation among
    /// those with `ε̂ᵢ ≤ 0`; ties go to the lowest index.
    pub fn most_violated(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.num_constraints() {
            if self.epsilon[i] > 0.0 {
                continue;
            }
            let v = (self.measured[i] - self.thresholds[i]) / self.thresholds[i].max(1e-12);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn constraint_budget(thresholds: &[f64], measured: &[f64], gamma: f64) -> Result<ConstraintBudget> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidInput(format!("discount {gamma} not in (0,1)")));
    }
    if thresholds.len() != measured.len() {
        return Err(Error::InvalidInput("threshold/measurement length mismatch".into()));
    }
    Ok(ConstraintBudget {
        epsilon: thresholds
            .iter()
            .zip(measured)
            .map(|(d0, d)| (1.0 - gamma) * (d0 - d))
            .collect(),
        measured: measured.to_vec(),
        thresholds: thresholds.to_vec(),
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::{rollout, DidacticEnv};
    use crate::func_approx::MlpParams;
    use crate::rng::{derive, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn traj_with_costs(costs: Vec<f64>) -> Trajectory {
        let h = costs.len();
        Trajectory {
            states: vec![vec![0.0, 0.0]; h + 1],
            actions_mean: vec![vec![0.0, 0.0]; h],
            actions_exec: vec![vec![0.0, 0.0]; h],
            rewards: vec![0.0; h],
            costs: vec![costs],
        }
    }

    #[test]
    fn lambda_one_is_monte_carlo() {
        let sig = [1.0, 2.0, 3.0, 4.0];
        let next = [5.0, 6.0, 7.0, 0.0];
        let g = lambda_returns(&sig, &next, 0.9, 1.0);
        for t in 0..4 {
            assert!((g[t] - discounted_sum(&sig[t..], 0.9)).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_zero_is_one_step() {
        let sig = [1.0, 2.0, 3.0];
        let next = [5.0, 6.0, 7.0];
        let g = lambda_returns(&sig, &next, 0.9, 0.0);
        for t in 0..3 {
            assert!((g[t] - (sig[t] + 0.9 * next[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_unrolled_half_lambda() {
        // r = [1, 0, 2], V(s1..s3) = [0.5, -1, 3], γ = 0.9, λ = 0.5
        // G2 = 2 + 0.9*(0.5*3 + 0.5*3) = 4.7
        // G1 = 0 + 0.9*(0.5*(-1) + 0.5*4.7) = 1.665
        // G0 = 1 + 0.9*(0.5*0.5 + 0.5*1.665) = 1.97425
        let g = lambda_returns(&[1.0, 0.0, 2.0], &[0.5, -1.0, 3.0], 0.9, 0.5);
        assert!((g[2] - 4.7).abs() < 1e-12);
        assert!((g[1] - 1.665).abs() < 1e-12);
        assert!((g[0] - 1.974_25).abs() < 1e-12);
    }

    #[test]
    fn targets_through_networks_match_recursion() {
        let env = DidacticEnv::default();
        let mut rng = derive(1, Stream::Init, 0, 0);
        let policy = DeterministicPolicy::init(2, &[8], vec![-0.2; 2], vec![0.2; 2], &mut rng).unwrap();
        let q = QFunction::init(2, 2, &[8], &mut rng).unwrap();
        let trajs: Vec<_> = (0..3)
            .map(|j| rollout(&env, &policy, 0.05, 10, &mut derive(1, Stream::EnvNoise, j, 0)).unwrap())
            .collect();
        let cfg = TdConfig {
            gamma: 0.99,
            lambda: 0.0,
            bootstrap_terminal: true,
        };
        let out = td_lambda_targets(&trajs, &q, &policy, cfg, Signal::Cost(0), Execution::Parallel).unwrap();
        for (tr, g) in trajs.iter().zip(&out.targets) {
            for (t, gt) in g.iter().enumerate() {
                let s = &tr.states[t + 1];
                let v = q.value(s, &policy.act(s).unwrap()).unwrap();
                assert!((gt - (tr.costs[0][t] + 0.99 * v)).abs() < 1e-12);
            }
        }
        let mc = td_lambda_targets(
            &trajs,
            &q,
            &policy,
            TdConfig {
                lambda: 1.0,
                bootstrap_terminal: false,
                ..cfg
            },
            Signal::Reward,
            Execution::Sequential,
        )
        .unwrap();
        for (tr, g) in trajs.iter().zip(&mc.targets) {
            for (t, gt) in g.iter().enumerate() {
                assert!((gt - discounted_sum(&tr.rewards[t..], 0.99)).abs() < 1e-12);
            }
        }
        assert!(td_lambda_targets(&[], &q, &policy, cfg, Signal::Reward, Execution::Sequential).is_err());
    }

    #[test]
    fn fit_reduces_loss_on_zero_targets() {
        let mut rng = derive(2, Stream::QFit, 0, 0);
        let q = QFunction::init(2, 2, &[16], &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let targets = vec![0.0; 200];
        let initial = mean_squared_error(&q, &inputs, &targets).unwrap();
        let (_, loss) = fit_q(&q, &inputs, &targets, FitConfig::default(), &mut rng).unwrap();
        assert!(loss < initial);
    }

    #[test]
    fn single_point_linear_fit_interpolates() {
        let q = QFunction::new(MlpParams::from_flat(&[3, 1], vec![0.1, -0.2, 0.3, 0.0]).unwrap(), 1).unwrap();
        let inputs = vec![vec![0.5, -1.0, 2.0]];
        let cfg = FitConfig {
            learning_rate: 1e-2,
            epochs: 3000,
            batch_size: 1,
        };
        let (fitted, loss) = fit_q(&q, &inputs, &[4.0], cfg, &mut derive(0, Stream::QFit, 0, 0)).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
        assert!((fitted.net.forward(&inputs[0]).unwrap()[0] - 4.0).abs() < 1e-3);
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let mut rng = derive(3, Stream::QFit, 0, 0);
        let q = QFunction::init(1, 1, &[4], &mut rng).unwrap();
        let cfg = FitConfig {
            epochs: 0,
            ..FitConfig::default()
        };
        let (fitted, _) = fit_q(&q, &[vec![0.0, 1.0]], &[3.0], cfg, &mut rng).unwrap();
        assert_eq!(fitted, q);
    }

    #[test]
    fn divergence_is_reported() {
        let q = QFunction::new(MlpParams::from_flat(&[2, 1], vec![1.0, 1.0, 0.0]).unwrap(), 1).unwrap();
        let err = fit_q(&q, &[vec![1.0, 1.0]], &[f64::INFINITY], FitConfig::default(), &mut derive(0, Stream::QFit, 0, 0));
        assert!(matches!(err, Err(Error::TrainingDivergence(_))));
    }

    #[test]
    fn policy_cost_examples() {
        assert_eq!(estimate_policy_cost(&[traj_with_costs(vec![0.0; 5])], 0.9, 0).unwrap(), 0.0);
        assert_eq!(estimate_policy_cost(&[traj_with_costs(vec![1.0, 1.0])], 0.5, 0).unwrap(), 1.5);
        // (1 + 0.5*2) and (4 + 0.5*0): mean of 2 and 4
        let two = [traj_with_costs(vec![1.0, 2.0]), traj_with_costs(vec![4.0, 0.0])];
        assert_eq!(estimate_policy_cost(&two, 0.5, 0).unwrap(), 3.0);
        assert!(estimate_policy_cost(&[], 0.5, 0).is_err());
    }

    #[test]
    fn budget_examples() {
        let b = constraint_budget(&[25.0], &[15.0], 0.99).unwrap();
        assert!((b.epsilon[0] - 0.1).abs() < 1e-12);
        assert_eq!(constraint_budget(&[3.0], &[3.0], 0.9).unwrap().epsilon[0], 0.0);
        let b = constraint_budget(&[2.0], &[1.0], 0.9).unwrap();
        assert!((b.epsilon[0] - 0.1).abs() < 1e-12);
        assert!(constraint_budget(&[2.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn most_violated_normalizes_and_breaks_ties_low() {
        let b = constraint_budget(&[1.0, 10.0, 2.0], &[1.5, 14.0, 3.0], 0.9).unwrap();
        // violations 0.5, 0.4, 0.5 -> tie between 0 and 2
        assert_eq!(b.most_violated(), Some(0));
        let b = constraint_budget(&[1.0, 1.0], &[0.5, 0.2], 0.9).unwrap();
        assert_eq!(b.most_violated(), None);
        assert!(b.all_safe());
    }

    proptest! {
        #[test]
        fn budget_sign_tracks_safety(d0 in 0.0f64..10.0, d in 0.0f64..10.0, gamma in 0.01f64..0.99) {
            let b = constraint_budget(&[d0], &[d], gamma).unwrap();
            prop_assert_eq!(b.epsilon[0] > 0.0, d < d0);
            prop_assert!((b.epsilon[0] - (1.0 - gamma) * (d0 - d)).abs() == 0.0);
        }
    }
}
