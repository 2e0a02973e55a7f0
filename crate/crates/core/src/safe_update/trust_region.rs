//! KL trust region for a deterministic policy under fixed Gaussian
//! exploration noise: mean KL, Fisher-vector products, conjugate gradient,
//! the closed-form step and the backtracking line search.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::func_approx::{DeterministicPolicy, PolicyTrace};

use crate::cmdp::ActionMap;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Mean over states of `KL(N(π_a(s), δ²I) ‖ N(π_b(s), δ²I)) = ‖π_a(s) − π_b(s)‖² / 2δ²`.
pub fn mean_kl(
    policy_a: &DeterministicPolicy,
    policy_b: &DeterministicPolicy,
    states: &[Vec<f64>],
    exploration_std: f64,
    exec: Execution,
) -> Result<f64> {
    if !(exploration_std > 0.0) {
        return Err(Error::DegenerateNoise);
    }
    if states.is_empty() {
        return Ok(0.0);
    }
    let inv = 1.0 / (2.0 * exploration_std * exploration_std);
    let total = exec.sum_scalars(states, |s| {
        let a = policy_a.action(s);
        let b = policy_b.action(s);
        a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * inv
    });
    Ok(total / states.len() as f64)
}

/// Matrix-free `H = (1/δ²)·mean_s J_sᵀJ_s + damping·I`, the Hessian of the
/// mean KL at the current parameters.
pub struct FisherOperator<'a> {
    policy: &'a DeterministicPolicy,
    traces: Vec<PolicyTrace>,
    inv_var: f64,
    damping: f64,
    exec: Execution,
}

impl<'a> FisherOperator<'a> {
    pub fn new(
        policy: &'a DeterministicPolicy,
        states: &[Vec<f64>],
        exploration_std: f64,
        damping: f64,
        exec: Execution,
    ) -> Result<Self> {
        if !(exploration_std > 0.0) {
            return Err(Error::DegenerateNoise);
        }
        let traces = exec
            .map(states, |s| policy.trace(s))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(FisherOperator {
            policy,
            traces,
            inv_var: 1.0 / (exploration_std * exploration_std),
            damping,
            exec,
        })
    }

    pub fn dim(&self) -> usize {
        self.policy.num_params()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.traces.len();
        let mut out = if n == 0 {
            vec![0.0; v.len()]
        } else {
            let scale = self.inv_var / n as f64;
            self.exec.sum_vectors(&self.traces, v.len(), |tr, acc| {
                let jv = self.policy.jvp(tr, v);
                self.policy.accumulate_vjp(tr, &jv, scale, acc);
            })
        };
        for (o, x) in out.iter_mut().zip(v) {
            *o += self.damping * x;
        }
        out
    }
}

/// One-shot Fisher-vector product at the policy's current parameters.
pub fn fisher_vector_product(
    policy: &DeterministicPolicy,
    states: &[Vec<f64>],
    v: &[f64],
    exploration_std: f64,
    damping: f64,
    exec: Execution,
) -> Result<Vec<f64>> {
    if v.len() != policy.num_params() {
        return Err(Error::InvalidInput("vector length differs from parameter count".into()));
    }
    Ok(FisherOperator::new(policy, states, exploration_std, damping, exec)?.apply(v))
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    /// Norm of the recurrence residual `g − Hx` at exit.
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `Hx = g` for symmetric positive definite `H`, stopping once
/// `‖g − Hx‖ ≤ tol·‖g‖` or after `iters` iterations.
pub fn conjugate_gradient<F>(apply_h: F, g: &[f64], iters: usize, tol: f64) -> Result<CgOutcome>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let threshold = tol * norm(g);
    let mut x = vec![0.0; g.len()];
    let mut r = g.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut iterations = 0;
    while iterations < iters && rs.sqrt() > threshold {
        let hp = apply_h(&p);
        let php = dot(&p, &hp);
        if !php.is_finite() || !rs.is_finite() {
            return Err(Error::NumericalBreakdown("non-finite value in conjugate gradient".into()));
        }
        if php <= 0.0 {
            return Err(Error::NumericalBreakdown(format!("operator not positive definite (pᵀHp = {php})")));
        }
        let alpha = rs / php;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let rs_next = dot(&r, &r);
        let beta = rs_next / rs;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_next;
        iterations += 1;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBreakdown("non-finite conjugate gradient solution".into()));
    }
    Ok(CgOutcome {
        x,
        residual: rs.sqrt(),
        iterations,
    })
}

/// Minimizer of `gᵀΔ` subject to `½ΔᵀHΔ ≤ μ`: `Δ = −sqrt(2μ / xᵀHx)·x`
/// with `x ≈ H⁻¹g` from conjugate gradient.
pub fn trust_region_direction<F>(g: &[f64], apply_h: F, mu: f64, cg_iters: usize, cg_tol: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if norm(g) == 0.0 {
        return Err(Error::InvalidInput("zero gradient has no trust-region direction".into()));
    }
    let x = conjugate_gradient(&apply_h, g, cg_iters, cg_tol)?.x;
    let curvature = dot(&x, &apply_h(&x));
    if !(curvature > 0.0) {
        return Err(Error::Curvature(curvature));
    }
    let scale = (2.0 * mu / curvature).sqrt();
    Ok(x.iter().map(|v| -scale * v).collect())
}

#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    pub params: Vec<f64>,
    /// Candidates evaluated.
    pub steps: usize,
    pub accepted: bool,
}

/// Tries `θ + decayʲ·Δ` for `j = 0..max_steps` and returns the first
/// candidate passing `accept`; falls back to `θ` when none does.
pub fn line_search<F>(theta: &[f64], full_step: &[f64], mut accept: F, decay: f64, max_steps: usize) -> LineSearchOutcome
where
    F: FnMut(&[f64]) -> bool,
{
    let mut frac = 1.0;
    for j in 0..max_steps {
        let candidate: Vec<f64> = theta.iter().zip(full_step).map(|(t, d)| t + frac * d).collect();
        if accept(&candidate) {
            return LineSearchOutcome {
                params: candidate,
                steps: j + 1,
                accepted: true,
            };
        }
        frac *= decay;
    }
    LineSearchOutcome {
        params: theta.to_vec(),
        steps: max_steps,
        accepted: false,
    }
}
