//! Logarithmic barrier on the per-state Lyapunov constraint and the
//! barrier-augmented deterministic policy-gradient surrogate.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::func_approx::{DeterministicPolicy, QFunction};
use crate::policy_eval::ConstraintBudget;

/// `Q^C(s, π_new(s)) − Q^C(s, π_base(s))`.
pub fn delta_q(qc: &QFunction, state: &[f64], policy_new: &DeterministicPolicy, policy_base: &DeterministicPolicy) -> Result<f64> {
    Ok(qc.value(state, &policy_new.act(state)?)? - qc.value(state, &policy_base.act(state)?)?)
}

/// `ψ = −β·log(ε̂ − ΔQ)`, defined for `ΔQ < ε̂` and `ε̂ > 0`.
pub fn barrier_value(delta_q: f64, epsilon: f64, beta: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::UnsafeBaseline {
            constraint: None,
            epsilon,
        });
    }
    if !(delta_q < epsilon) {
        return Err(Error::BarrierDomain { delta_q, epsilon });
    }
    Ok(-beta * (epsilon - delta_q).ln())
}

/// The LBPO surrogate around a fixed baseline policy `π_B`:
///
/// `mean_s [ −Q^R(s, π(s)) + Σᵢ −β·log(ε̂ᵢ − ΔQᵢ(s)) ]`.
pub struct Surrogate<'a> {
    pub base: &'a DeterministicPolicy,
    pub states: &'a [Vec<f64>],
    pub qr: &'a QFunction,
    pub qcs: &'a [QFunction],
    pub budget: &'a ConstraintBudget,
    /// Effective barrier weight (zero disables the barrier term).
    pub beta: f64,
    /// `Q^{C_i}(s, π_B(s))`, indexed `[state][constraint]`.
    base_costs: Vec<Vec<f64>>,
    exec: Execution,
}

impl<'a> Surrogate<'a> {
    pub fn new(
        base: &'a DeterministicPolicy,
        states: &'a [Vec<f64>],
        qr: &'a QFunction,
        qcs: &'a [QFunction],
        budget: &'a ConstraintBudget,
        beta: f64,
        exec: Execution,
    ) -> Result<Self> {
        check_shapes(base, qr, qcs, budget)?;
        for (i, eps) in budget.epsilon.iter().enumerate() {
            if !(*eps > 0.0) {
                return Err(Error::UnsafeBaseline {
                    constraint: Some(i),
                    epsilon: *eps,
                });
            }
        }
        let base_costs = exec
            .map(states, |s| -> Result<Vec<f64>> {
                let a = base.act(s)?;
                qcs.iter().map(|q| q.value(s, &a)).collect()
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Surrogate {
            base,
            states,
            qr,
            qcs,
            budget,
            beta,
            base_costs,
            exec,
        })
    }

    /// Smallest `ε̂ᵢ − ΔQᵢ(s)` over the batch.
    pub fn min_margin(&self, candidate: &DeterministicPolicy) -> f64 {
        self.exec
            .map_indexed(self.states.len(), |k| {
                let s = &self.states[k];
                let a = candidate.act(s).expect("validated shapes");
                self.qcs
                    .iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let dq = q.value(s, &a).expect("validated shapes") - self.base_costs[k][i];
                        self.budget.epsilon[i] - dq
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Surrogate value at `candidate`; errors outside the barrier domain
    /// when the barrier is active.
    pub fn value(&self, candidate: &DeterministicPolicy) -> Result<f64> {
        if self.states.is_empty() {
            return Ok(0.0);
        }
        let per_state = self.exec.map_indexed(self.states.len(), |k| -> Result<f64> {
            let s = &self.states[k];
            let a = candidate.act(s)?;
            let mut v = -self.qr.value(s, &a)?;
            if self.beta > 0.0 {
                for (i, q) in self.qcs.iter().enumerate() {
                    let dq = q.value(s, &a)? - self.base_costs[k][i];
                    v += barrier_value(dq, self.budget.epsilon[i], self.beta)?;
                }
            }
            Ok(v)
        });
        let mut total = 0.0;
        for v in per_state {
            total += v?;
        }
        Ok(total / self.states.len() as f64)
    }

    /// Exact gradient of the surrogate with respect to the policy
    /// parameters, evaluated at `π_B` (where every `ΔQᵢ = 0`).
    pub fn gradient(&self) -> Vec<f64> {
        let dim = self.base.num_params();
        if self.states.is_empty() {
            return vec![0.0; dim];
        }
        let scale = 1.0 / self.states.len() as f64;
        let coeffs: Vec<f64> = self.budget.epsilon.iter().map(|e| self.beta / e).collect();
        self.exec.sum_vectors(self.states, dim, |s, acc| {
            let tr = self.base.trace(s).expect("validated shapes");
            let (_, gr) = self.qr.value_and_grad_action(s, &tr.action).expect("validated shapes");
            let mut upstream: Vec<f64> = gr.iter().map(|g| -g).collect();
            if self.beta > 0.0 {
                for (q, c) in self.qcs.iter().zip(&coeffs) {
                    let (_, gc) = q.value_and_grad_action(s, &tr.action).expect("validated shapes");
                    for (u, g) in upstream.iter_mut().zip(&gc) {
                        *u += c * g;
                    }
                }
            }
            self.base.accumulate_vjp(&tr, &upstream, scale, acc);
        })
    }
}

pub(crate) fn check_shapes(policy: &DeterministicPolicy, qr: &QFunction, qcs: &[QFunction], budget: &ConstraintBudget) -> Result<()> {
    let sd = policy.net.input_dim();
    let ad = policy.net.output_dim();
    for q in std::iter::once(qr).chain(qcs) {
        if q.state_dim() != sd || q.action_dim() != ad {
            return Err(Error::InvalidInput("Q-function shape does not match the policy".into()));
        }
    }
    if qcs.len() != budget.num_constraints() {
        return Err(Error::InvalidInput("one cost Q-function per constraint required".into()));
    }
    Ok(())
}

/// Gradient of the LBPO surrogate at `θ = θ_k`.
pub fn lbpo_surrogate_gradient(
    states: &[Vec<f64>],
    policy: &DeterministicPolicy,
    qr: &QFunction,
    qcs: &[QFunction],
    budget: &ConstraintBudget,
    beta: f64,
    exec: Execution,
) -> Result<Vec<f64>> {
    Ok(Surrogate::new(policy, states, qr, qcs, budget, beta, exec)?.gradient())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::func_approx::MlpParams;
    use crate::policy_eval::constraint_budget;
    use crate::rng::{derive, Stream};
    use rand::Rng;

    #[test]
    fn barrier_examples() {
        assert!((barrier_value(0.0, 2.0, 1.0).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert_eq!(barrier_value(1.0, 2.0, 0.5).unwrap(), 0.0);
        assert!(matches!(barrier_value(2.0, 2.0, 1.0), Err(Error::BarrierDomain { .. })));
        assert!(matches!(barrier_value(0.0, 0.0, 1.0), Err(Error::UnsafeBaseline { .. })));
        assert!(matches!(barrier_value(-1.0, -0.5, 1.0), Err(Error::UnsafeBaseline { .. })));
    }

    #[test]
    fn barrier_is_increasing_and_blows_up() {
        for beta in [0.005, 0.1, 2.0] {
            let grid: Vec<f64> = (0..200).map(|i| -3.0 + i as f64 * 0.0249).collect();
            for w in grid.windows(2) {
                assert!(barrier_value(w[1], 2.0, beta).unwrap() > barrier_value(w[0], 2.0, beta).unwrap());
            }
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=8 {
                let v = barrier_value(2.0 - 10f64.powi(-k), 2.0, beta).unwrap();
                assert!(v > prev);
                prev = v;
            }
        }
    }

    #[test]
    fn delta_q_examples() {
        let mut rng = derive(1, Stream::Init, 0, 0);
        let pol = DeterministicPolicy::init(2, &[4], vec![-0.2; 2], vec![0.2; 2], &mut rng).unwrap();
        let q = QFunction::init(2, 2, &[5], &mut rng).unwrap();
        let s = [0.3, -0.2];
        assert_eq!(delta_q(&q, &s, &pol, &pol).unwrap(), 0.0);

        // Q linear in the action: Q = w·a.
        let lin = QFunction::new(MlpParams::from_flat(&[4, 1], vec![0.0, 0.0, 1.5, -2.0, 0.0]).unwrap(), 2).unwrap();
        let zero = MlpParams::zeros(&[2, 2]).unwrap();
        let a = DeterministicPolicy::new(zero.clone(), vec![-1.0; 2], vec![1.0; 2]).unwrap();
        let b = DeterministicPolicy::new(zero, vec![-0.9, -1.2], vec![1.1, 0.8]).unwrap();
        // π_b − π_a = (0.1, −0.2) → 1.5·0.1 + 2·0.2
        assert!((delta_q(&lin, &s, &b, &a).unwrap() - 0.55).abs() < 1e-12);

        let perturbed = pol.with_params(&pol.params().iter().map(|p| p + 0.05).collect::<Vec<_>>());
        let direct = q.value(&s, &perturbed.act(&s).unwrap()).unwrap() - q.value(&s, &pol.act(&s).unwrap()).unwrap();
        assert_eq!(delta_q(&q, &s, &perturbed, &pol).unwrap(), direct);
    }

    #[test]
    fn beta_zero_is_pure_reward_gradient() {
        let mut rng = derive(2, Stream::Init, 0, 0);
        let pol = DeterministicPolicy::init(2, &[4], vec![-0.2; 2], vec![0.2; 2], &mut rng).unwrap();
        let qr = QFunction::init(2, 2, &[5], &mut rng).unwrap();
        let qc = QFunction::init(2, 2, &[5], &mut rng).unwrap();
        let budget = constraint_budget(&[2.0], &[1.0], 0.99).unwrap();
        let s = vec![vec![0.1, 0.4]];
        let g = lbpo_surrogate_gradient(&s, &pol, &qr, &[qc], &budget, 0.0, Execution::Sequential).unwrap();
        let tr = pol.trace(&s[0]).unwrap();
        let ga = qr.grad_action(&s[0], &tr.action).unwrap();
        let mut expected = vec![0.0; pol.num_params()];
        pol.accumulate_vjp(&tr, &ga, -1.0, &mut expected);
        for (a, b) in g.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn action_constant_reward_contributes_nothing() {
        let mut rng = derive(3, Stream::Init, 0, 0);
        let pol = DeterministicPolicy::init(2, &[4], vec![-0.2; 2], vec![0.2; 2], &mut rng).unwrap();
        // Q^R depends on the state only.
        let qr = QFunction::new(MlpParams::from_flat(&[4, 1], vec![1.0, -1.0, 0.0, 0.0, 0.3]).unwrap(), 2).unwrap();
        let qc = QFunction::init(2, 2, &[5], &mut rng).unwrap();
        let budget = constraint_budget(&[2.0], &[1.0], 0.99).unwrap();
        let s = vec![vec![0.1, 0.4]];
        let g = lbpo_surrogate_gradient(&s, &pol, &qr, &[qc], &budget, 0.0, Execution::Sequential).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unsafe_budget_rejected() {
        let mut rng = derive(4, Stream::Init, 0, 0);
        let pol = DeterministicPolicy::init(2, &[4], vec![-0.2; 2], vec![0.2; 2], &mut rng).unwrap();
        let q = QFunction::init(2, 2, &[5], &mut rng).unwrap();
        let budget = constraint_budget(&[1.0], &[1.5], 0.99).unwrap();
        let err = lbpo_surrogate_gradient(&[vec![0.0, 0.0]], &pol, &q, std::slice::from_ref(&q), &budget, 0.1, Execution::Sequential);
        assert!(matches!(err, Err(Error::UnsafeBaseline { constraint: Some(0), .. })));
    }

    #[test]
    fn gradient_matches_surrogate_differences() {
        let mut rng = derive(5, Stream::Init, 0, 0);
        let mut pol = DeterministicPolicy::init(2, &[6], vec![-0.2; 2], vec![0.2; 2], &mut rng).unwrap();
        // Larger output weights so the squash is not trivially linear.
        let bumped: Vec<f64> = pol.params().iter().map(|p| p + rng.random_range(-0.5..0.5)).collect();
        pol = pol.with_params(&bumped);
        let qr = QFunction::init(2, 2, &[6], &mut rng).unwrap();
        let qcs = vec![QFunction::init(2, 2, &[6], &mut rng).unwrap(), QFunction::init(2, 2, &[6], &mut rng).unwrap()];
        let budget = constraint_budget(&[2.0, 1.0], &[1.5, 0.2], 0.9).unwrap();
        let states = vec![vec![0.5, -0.3]];
        let sur = Surrogate::new(&pol, &states, &qr, &qcs, &budget, 0.05, Execution::Sequential).unwrap();
        let g = sur.gradient();
        let h = 1e-6;
        for i in 0..pol.num_params() {
            let mut up = pol.params().to_vec();
            up[i] += h;
            let mut dn = pol.params().to_vec();
            dn[i] -= h;
            let fd = (sur.value(&pol.with_params(&up)).unwrap() - sur.value(&pol.with_params(&dn)).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() / g[i].abs().max(1.0) < 1e-4, "coord {i}: {fd} vs {}", g[i]);
        }
        assert!((sur.min_margin(&pol) - budget.epsilon[1].min(budget.epsilon[0])).abs() < 1e-15);
    }
}
