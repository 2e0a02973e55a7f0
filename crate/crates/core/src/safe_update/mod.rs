//! Safe policy updates.
//!
//! [`lbpo_update`] minimizes the barrier-augmented surrogate inside a KL
//! trust region; [`backtrack_update`] optimizes reward while the measured
//! policy is safe and cost otherwise; [`reward_update`] is the
//! unconstrained reward step.

mod barrier;
mod trust_region;

pub use barrier::{barrier_value, delta_q, lbpo_surrogate_gradient, Surrogate};
pub use trust_region::{
    conjugate_gradient, fisher_vector_product, line_search, mean_kl, trust_region_direction, CgOutcome, FisherOperator,
    LineSearchOutcome,
};

use serde::{Deserialize, Serialize};

use crate::cmdp::Trajectory;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::func_approx::{DeterministicPolicy, QFunction};
use crate::policy_eval::ConstraintBudget;
use barrier::check_shapes;
use trust_region::norm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierConfig {
    pub beta: f64,
    pub beta_thres: f64,
    /// Drop the barrier loss whenever `beta < beta_thres`.
    pub literal_beta_thres_mode: bool,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        BarrierConfig {
            beta: 0.005,
            beta_thres: 0.05,
            literal_beta_thres_mode: false,
        }
    }
}

impl BarrierConfig {
    pub fn effective_beta(&self) -> f64 {
        if self.literal_beta_thres_mode && self.beta < self.beta_thres {
            0.0
        } else {
            self.beta
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustRegionConfig {
    /// KL radius μ.
    pub mu: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub damping: f64,
    /// Line-search shrink factor.
    pub decay: f64,
    pub max_linesearch: usize,
    /// Exploration noise std δ.
    pub exploration_std: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        TrustRegionConfig {
            mu: 0.012,
            cg_iters: 10,
            cg_tol: 1e-8,
            damping: 1e-2,
            decay: 0.8,
            max_linesearch: 10,
            exploration_std: 0.05,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !(self.decay > 0.0 && self.decay < 1.0) || !(self.damping >= 0.0) {
            return Err(Error::InvalidInput("need mu > 0, 0 < decay < 1, damping >= 0".into()));
        }
        if !(self.exploration_std > 0.0) {
            return Err(Error::DegenerateNoise);
        }
        Ok(())
    }
}

/// Outcome of one policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub accepted: bool,
    /// Mean KL between the returned and the incoming policy.
    pub kl_after: f64,
    pub linesearch_steps: usize,
    /// The cost-recovery objective was used.
    pub backtracked: bool,
    /// `min_{s,i} ε̂ᵢ − ΔQᵢ(s)` at the returned policy.
    pub min_margin: f64,
    pub gradient_norm: f64,
}

struct StepOutcome {
    policy: DeterministicPolicy,
    accepted: bool,
    steps: usize,
    kl: f64,
}

/// Trust-region step along `−H⁻¹g`, line-searched on `objective` (strict
/// decrease), the KL radius and `feasible`.
fn trust_region_step<O, C>(
    policy: &DeterministicPolicy,
    states: &[Vec<f64>],
    g: &[f64],
    objective: O,
    feasible: C,
    tr: &TrustRegionConfig,
    exec: Execution,
) -> Result<StepOutcome>
where
    O: Fn(&DeterministicPolicy) -> Result<f64>,
    C: Fn(&DeterministicPolicy) -> bool,
{
    if norm(g) == 0.0 || states.is_empty() {
        return Ok(StepOutcome {
            policy: policy.clone(),
            accepted: true,
            steps: 0,
            kl: 0.0,
        });
    }
    let fisher = FisherOperator::new(policy, states, tr.exploration_std, tr.damping, exec)?;
    let full = trust_region_direction(g, |v| fisher.apply(v), tr.mu, tr.cg_iters, tr.cg_tol)?;
    let f0 = objective(policy)?;
    let mut last_kl = 0.0;
    let search = line_search(
        policy.params(),
        &full,
        |theta| {
            let cand = policy.with_params(theta);
            let Ok(kl) = mean_kl(&cand, policy, states, tr.exploration_std, exec) else {
                return false;
            };
            if !(kl <= tr.mu) || !feasible(&cand) {
                return false;
            }
            match objective(&cand) {
                Ok(f) if f < f0 => {
                    last_kl = kl;
                    true
                }
                _ => false,
            }
        },
        tr.decay,
        tr.max_linesearch,
    );
    Ok(StepOutcome {
        policy: policy.with_params(&search.params),
        accepted: search.accepted,
        steps: search.steps,
        kl: if search.accepted { last_kl } else { 0.0 },
    })
}

fn decision_states(trajectories: &[Trajectory]) -> Vec<Vec<f64>> {
    trajectories.iter().flat_map(|t| t.decision_states().iter().cloned()).collect()
}

/// `mean_s sign·Q(s, π(s))` and its parameter gradient at `π`.
fn mean_q_objective<'a>(
    policy: &DeterministicPolicy,
    q: &'a QFunction,
    states: &'a [Vec<f64>],
    sign: f64,
    exec: Execution,
) -> (Vec<f64>, impl Fn(&DeterministicPolicy) -> Result<f64> + 'a) {
    let n = states.len().max(1) as f64;
    let g = exec.sum_vectors(states, policy.num_params(), |s, acc| {
        let tr = policy.trace(s).expect("validated shapes");
        let ga = q.grad_action(s, &tr.action).expect("validated shapes");
        policy.accumulate_vjp(&tr, &ga, sign / n, acc);
    });
    let objective = move |p: &DeterministicPolicy| -> Result<f64> {
        let vals = exec.map(states, |s| -> Result<f64> { q.value(s, &p.act(s)?) });
        let mut total = 0.0;
        for v in vals {
            total += v?;
        }
        Ok(sign * total / n)
    };
    (g, objective)
}

/// `min_{s,i} ε̂ᵢ − ΔQᵢ(s)` of `candidate` relative to `base`.
fn margin(
    base: &DeterministicPolicy,
    candidate: &DeterministicPolicy,
    states: &[Vec<f64>],
    qcs: &[QFunction],
    budget: &ConstraintBudget,
    exec: Execution,
) -> f64 {
    exec.map(states, |s| {
        let a_new = candidate.act(s).expect("validated shapes");
        let a_base = base.act(s).expect("validated shapes");
        qcs.iter()
            .enumerate()
            .map(|(i, q)| {
                let dq = q.value(s, &a_new).expect("validated shapes") - q.value(s, &a_base).expect("validated shapes");
                budget.epsilon[i] - dq
            })
            .fold(f64::INFINITY, f64::min)
    })
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

#[allow(clippy::too_many_arguments)]
fn objective_step(
    policy: &DeterministicPolicy,
    states: &[Vec<f64>],
    q: &QFunction,
    sign: f64,
    qcs: &[QFunction],
    budget: &ConstraintBudget,
    backtracked: bool,
    tr: &TrustRegionConfig,
    exec: Execution,
) -> Result<(DeterministicPolicy, UpdateReport)> {
    let (g, objective) = mean_q_objective(policy, q, states, sign, exec);
    let step = trust_region_step(policy, states, &g, objective, |_| true, tr, exec)?;
    let min_margin = margin(policy, &step.policy, states, qcs, budget, exec);
    Ok((
        step.policy,
        UpdateReport {
            accepted: step.accepted,
            kl_after: step.kl,
            linesearch_steps: step.steps,
            backtracked,
            min_margin,
            gradient_norm: norm(&g),
        },
    ))
}

/// One LBPO policy update on the decision states of `trajectories`.
///
/// Falls back to a cost-recovery step (flagged `backtracked`) when any
/// budget is non-positive.
#[allow(clippy::too_many_arguments)]
pub fn lbpo_update(
    policy: &DeterministicPolicy,
    trajectories: &[Trajectory],
    qr: &QFunction,
    qcs: &[QFunction],
    budget: &ConstraintBudget,
    barrier: &BarrierConfig,
    tr: &TrustRegionConfig,
    exec: Execution,
) -> Result<(DeterministicPolicy, UpdateReport)> {
    lbpo_update_on_states(policy, &decision_states(trajectories), qr, qcs, budget, barrier, tr, exec)
}

#[allow(clippy::too_many_arguments)]
pub fn lbpo_update_on_states(
    policy: &DeterministicPolicy,
    states: &[Vec<f64>],
    qr: &QFunction,
    qcs: &[QFunction],
    budget: &ConstraintBudget,
    barrier: &BarrierConfig,
    tr: &TrustRegionConfig,
    exec: Execution,
) -> Result<(DeterministicPolicy, UpdateReport)> {
    tr.validate()?;
    check_shapes(policy, qr, qcs, budget)?;
    if let Some(j) = budget.most_violated() {
        return objective_step(policy, states, &qcs[j], 1.0, qcs, budget, true, tr, exec);
    }
    let surrogate = Surrogate::new(policy, states, qr, qcs, budget, barrier.effective_beta(), exec)?;
    let g = surrogate.gradient();
    let step = trust_region_step(
        policy,
        states,
        &g,
        |p| surrogate.value(p),
        |p| surrogate.min_margin(p) > 0.0,
        tr,
        exec,
    )?;
    let min_margin = surrogate.min_margin(&step.policy);
    Ok((
        step.policy,
        UpdateReport {
            accepted: step.accepted,
            kl_after: step.kl,
            linesearch_steps: step.steps,
            backtracked: false,
            min_margin,
            gradient_norm: norm(&g),
        },
    ))
}

/// Reward step while every budget is positive, otherwise a step on the
/// most violated constraint's cost. No barrier; KL-only line search.
#[allow(clippy::too_many_arguments)]
pub fn backtrack_update(
    policy: &DeterministicPolicy,
    trajectories: &[Trajectory],
    qr: &QFunction,
    qcs: &[QFunction],
    budget: &ConstraintBudget,
    tr: &TrustRegionConfig,
    exec: Execution,
) -> Result<(DeterministicPolicy, UpdateReport)> {
    backtrack_update_on_states(policy, &decision_states(trajectories), qr, qcs, budget, tr, exec)
}

pub fn backtrack_update_on_states(
    policy: &DeterministicPolicy,
    states: &[Vec<f64>],
    qr: &QFunction,
    qcs: &[QFunction],
    budget: &ConstraintBudget,
    tr: &TrustRegionConfig,
    exec: Execution,
) -> Result<(DeterministicPolicy, UpdateReport)> {
    tr.validate()?;
    check_shapes(policy, qr, qcs, budget)?;
    match budget.most_violated() {
        Some(j) => objective_step(policy, states, &qcs[j], 1.0, qcs, budget, true, tr, exec),
        None => objective_step(policy, states, qr, -1.0, qcs, budget, false, tr, exec),
    }
}

/// Reward-only trust-region step regardless of the budgets.
pub fn reward_update(
    policy: &DeterministicPolicy,
    trajectories: &[Trajectory],
    qr: &QFunction,
    qcs: &[QFunction],
    budget: &ConstraintBudget,
    tr: &TrustRegionConfig,
    exec: Execution,
) -> Result<(DeterministicPolicy, UpdateReport)> {
    tr.validate()?;
    check_shapes(policy, qr, qcs, budget)?;
    objective_step(policy, &decision_states(trajectories), qr, -1.0, qcs, budget, false, tr, exec)
}

/// Cost-minimizing step on constraint `constraint`, used for recovery and
/// safe initialization.
pub fn cost_update(
    policy: &DeterministicPolicy,
    trajectories: &[Trajectory],
    qc: &QFunction,
    tr: &TrustRegionConfig,
    exec: Execution,
) -> Result<(DeterministicPolicy, UpdateReport)> {
    tr.validate()?;
    let states = decision_states(trajectories);
    let (g, objective) = mean_q_objective(policy, qc, &states, 1.0, exec);
    let step = trust_region_step(policy, &states, &g, objective, |_| true, tr, exec)?;
    Ok((
        step.policy,
        UpdateReport {
            accepted: step.accepted,
            kl_after: step.kl,
            linesearch_steps: step.steps,
            backtracked: true,
            min_margin: f64::NAN,
            gradient_norm: norm(&g),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::func_approx::MlpParams;
    use crate::policy_eval::constraint_budget;
    use crate::rng::{derive, Stream};
    use rand::Rng;

    struct Fixture {
        policy: DeterministicPolicy,
        qr: QFunction,
        qc: QFunction,
        states: Vec<Vec<f64>>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = derive(seed, Stream::Init, 0, 0);
        let policy = DeterministicPolicy::init(2, &[8], vec![-0.2; 2], vec![0.2; 2], &mut rng).unwrap();
        let qr = QFunction::init(2, 2, &[8], &mut rng).unwrap();
        let qc = QFunction::init(2, 2, &[8], &mut rng).unwrap();
        let states = (0..40).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        Fixture { policy, qr, qc, states }
    }

    #[test]
    fn effective_beta() {
        let mut b = BarrierConfig::default();
        assert_eq!(b.effective_beta(), 0.005);
        b.literal_beta_thres_mode = true;
        assert_eq!(b.effective_beta(), 0.0);
        b.beta = 0.1;
        assert_eq!(b.effective_beta(), 0.1);
    }

    #[test]
    fn lbpo_step_respects_radius_and_margin() {
        let tr = TrustRegionConfig::default();
        let mut accepted = 0;
        for seed in 0..5 {
            let f = fixture(seed);
            let budget = constraint_budget(&[2.0], &[1.9], 0.99).unwrap();
            let barrier = BarrierConfig { beta: 0.01, ..Default::default() };
            let (new, rep) = lbpo_update_on_states(&f.policy, &f.states, &f.qr, std::slice::from_ref(&f.qc), &budget, &barrier, &tr, Execution::Sequential).unwrap();
            assert!(!rep.backtracked);
            let kl = mean_kl(&new, &f.policy, &f.states, tr.exploration_std, Execution::Sequential).unwrap();
            assert!(kl <= tr.mu + 1e-12);
            assert!(rep.min_margin > 0.0);
            if rep.accepted {
                accepted += 1;
                assert_eq!(kl, rep.kl_after);
                let qcs = [f.qc.clone()];
                let sur = Surrogate::new(&f.policy, &f.states, &f.qr, &qcs, &budget, 0.01, Execution::Sequential).unwrap();
                assert!(sur.value(&new).unwrap() < sur.value(&f.policy).unwrap());
            } else {
                assert_eq!(new.params(), f.policy.params());
            }
        }
        assert!(accepted > 0);
    }

    #[test]
    fn beta_zero_matches_backtrack_when_safe() {
        let tr = TrustRegionConfig::default();
        let f = fixture(11);
        let budget = constraint_budget(&[1e6], &[1.0], 0.99).unwrap();
        let barrier = BarrierConfig { beta: 0.0, ..Default::default() };
        let qcs = [f.qc.clone()];
        let (a, ra) = lbpo_update_on_states(&f.policy, &f.states, &f.qr, &qcs, &budget, &barrier, &tr, Execution::Sequential).unwrap();
        let (b, rb) = backtrack_update_on_states(&f.policy, &f.states, &f.qr, &qcs, &budget, &tr, Execution::Sequential).unwrap();
        assert!(!rb.backtracked);
        assert_eq!(ra.linesearch_steps, rb.linesearch_steps);
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_positive_budget_triggers_recovery() {
        let tr = TrustRegionConfig::default();
        let f = fixture(12);
        let qcs = [f.qc.clone()];
        let budget = constraint_budget(&[1.0], &[1.5], 0.99).unwrap();
        let (new, rep) = lbpo_update_on_states(&f.policy, &f.states, &f.qr, &qcs, &budget, &BarrierConfig::default(), &tr, Execution::Sequential).unwrap();
        assert!(rep.backtracked);
        let mean_cost = |p: &DeterministicPolicy| f.states.iter().map(|s| f.qc.value(s, &p.act(s).unwrap()).unwrap()).sum::<f64>();
        if rep.accepted {
            assert!(mean_cost(&new) < mean_cost(&f.policy));
        }
    }

    #[test]
    fn backtrack_alternates_objective() {
        let tr = TrustRegionConfig::default();
        let f = fixture(13);
        let qcs = [f.qc.clone()];
        for (measured, unsafe_) in [(1.0, false), (3.0, true), (1.999, false), (2.0, true)] {
            let budget = constraint_budget(&[2.0], &[measured], 0.99).unwrap();
            let (_, rep) = backtrack_update_on_states(&f.policy, &f.states, &f.qr, &qcs, &budget, &tr, Execution::Sequential).unwrap();
            assert_eq!(rep.backtracked, unsafe_);
        }
    }

    #[test]
    fn zero_gradient_is_an_accepted_null_step() {
        let tr = TrustRegionConfig::default();
        let f = fixture(14);
        // Q^R independent of the action.
        let flat_q = QFunction::new(MlpParams::zeros(&[4, 1]).unwrap(), 2).unwrap();
        let budget = constraint_budget(&[2.0], &[1.0], 0.99).unwrap();
        let barrier = BarrierConfig { beta: 0.0, ..Default::default() };
        let (new, rep) = lbpo_update_on_states(&f.policy, &f.states, &flat_q, std::slice::from_ref(&f.qc), &budget, &barrier, &tr, Execution::Sequential).unwrap();
        assert!(rep.accepted);
        assert_eq!(rep.linesearch_steps, 0);
        assert_eq!(rep.kl_after, 0.0);
        assert_eq!(new.params(), f.policy.params());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let tr = TrustRegionConfig::default();
        let f = fixture(15);
        let budget = constraint_budget(&[2.0, 2.0], &[1.0, 1.0], 0.99).unwrap();
        let r = lbpo_update_on_states(&f.policy, &f.states, &f.qr, std::slice::from_ref(&f.qc), &budget, &BarrierConfig::default(), &tr, Execution::Sequential);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let tr = TrustRegionConfig::default();
        let f = fixture(16);
        let qcs = [f.qc.clone()];
        let budget = constraint_budget(&[2.0], &[1.7], 0.99).unwrap();
        let barrier = BarrierConfig { beta: 0.02, ..Default::default() };
        let (a, ra) = lbpo_update_on_states(&f.policy, &f.states, &f.qr, &qcs, &budget, &barrier, &tr, Execution::Sequential).unwrap();
        let (b, rb) = lbpo_update_on_states(&f.policy, &f.states, &f.qr, &qcs, &budget, &barrier, &tr, Execution::Parallel).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra, rb);
    }
}
