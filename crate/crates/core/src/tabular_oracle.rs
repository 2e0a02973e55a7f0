//! Exact dense-linear-algebra evaluation of tabular CMDPs: policy values,
//! Lyapunov functions, budgets, and safety certificates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::cmdp::{Signal, TabularCmdp};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{derive, Stream};

/// Pointwise tolerance of the Lyapunov condition `B_{π,c}[L] ≤ L`.
pub const POINTWISE_TOL: f64 = 1e-12;
/// Tolerance of `L(s0) ≤ d0` and of the certified cost bound.
pub const COST_TOL: f64 = 1e-9;

/// Stationary stochastic policy `π[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_states = rows.len();
        let num_actions = rows.first().map_or(0, Vec::len);
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidInput("empty policy".into()));
        }
        for (s, row) in rows.iter().enumerate() {
            if row.len() != num_actions {
                return Err(Error::InvalidInput(format!("row {s} has the wrong length")));
            }
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidInput(format!("row {s} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("row {s} sums to {sum}")));
            }
        }
        Ok(TabularPolicy {
            num_states,
            num_actions,
            probs: rows.concat(),
        })
    }

    /// One-hot rows selecting `actions[s]`.
    pub fn deterministic(actions: &[usize], num_actions: usize) -> Result<Self> {
        if actions.iter().any(|a| *a >= num_actions) {
            return Err(Error::InvalidInput("action index out of range".into()));
        }
        TabularPolicy::new(
            actions
                .iter()
                .map(|a| (0..num_actions).map(|b| if b == *a { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Result<Self> {
        TabularPolicy::new(vec![vec![1.0 / num_actions as f64; num_actions]; num_states])
    }

    /// Rows drawn uniformly from the simplex.
    pub fn random<R: Rng + ?Sized>(num_states: usize, num_actions: usize, rng: &mut R) -> Self {
        let probs = (0..num_states)
            .flat_map(|_| {
                let e: Vec<f64> = (0..num_actions).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(move |x| x / z)
            })
            .collect();
        TabularPolicy {
            num_states,
            num_actions,
            probs,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    /// `(1 − t)·self + t·other`.
    pub fn mix(&self, other: &TabularPolicy, t: f64) -> TabularPolicy {
        TabularPolicy {
            num_states: self.num_states,
            num_actions: self.num_actions,
            probs: self.probs.iter().zip(&other.probs).map(|(a, b)| (1.0 - t) * a + t * b).collect(),
        }
    }

    fn check(&self, cmdp: &TabularCmdp) -> Result<()> {
        if self.num_states != cmdp.num_states || self.num_actions != cmdp.num_actions {
            return Err(Error::InvalidInput("policy shape does not match the CMDP".into()));
        }
        Ok(())
    }
}

fn check_signal(cmdp: &TabularCmdp, signal: Signal) -> Result<()> {
    match signal {
        Signal::Cost(i) if i >= cmdp.num_constraints() => Err(Error::InvalidInput(format!("no constraint {i}"))),
        _ => Ok(()),
    }
}

fn signal_value(cmdp: &TabularCmdp, signal: Signal, s: usize, a: usize) -> f64 {
    match signal {
        Signal::Reward => cmdp.reward(s, a),
        Signal::Cost(i) => cmdp.cost(i, s),
    }
}

/// Policy-marginalized transition matrix `P^π`.
pub fn transition_matrix(cmdp: &TabularCmdp, policy: &TabularPolicy) -> DMatrix<f64> {
    let n = cmdp.num_states;
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..cmdp.num_actions {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (next, q) in cmdp.row(s, a).iter().enumerate() {
                p[(s, next)] += w * q;
            }
        }
    }
    p
}

/// Policy-marginalized signal `h^π`.
pub fn signal_vector(cmdp: &TabularCmdp, policy: &TabularPolicy, signal: Signal) -> DVector<f64> {
    DVector::from_iterator(
        cmdp.num_states,
        (0..cmdp.num_states).map(|s| (0..cmdp.num_actions).map(|a| policy.prob(s, a) * signal_value(cmdp, signal, s, a)).sum()),
    )
}

fn resolvent_system(cmdp: &TabularCmdp, policy: &TabularPolicy) -> DMatrix<f64> {
    let n = cmdp.num_states;
    DMatrix::identity(n, n) - transition_matrix(cmdp, policy) * cmdp.gamma
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<Vec<f64>> {
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NumericalBreakdown("singular (I − γP) system".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalBreakdown("non-finite solution of (I − γP) system".into()));
    }
    Ok(x.iter().copied().collect())
}

/// `V = (I − γP^π)⁻¹ h^π` by a direct solve.
pub fn exact_value(cmdp: &TabularCmdp, policy: &TabularPolicy, signal: Signal) -> Result<Vec<f64>> {
    policy.check(cmdp)?;
    check_signal(cmdp, signal)?;
    solve(resolvent_system(cmdp, policy), signal_vector(cmdp, policy, signal))
}

/// `V ← h^π + γP^π V` from zero, `iterations` times.
pub fn value_iteration(cmdp: &TabularCmdp, policy: &TabularPolicy, signal: Signal, iterations: usize) -> Result<Vec<f64>> {
    policy.check(cmdp)?;
    check_signal(cmdp, signal)?;
    let p = transition_matrix(cmdp, policy);
    let h = signal_vector(cmdp, policy, signal);
    let mut v = DVector::zeros(cmdp.num_states);
    for _ in 0..iterations {
        v = &h + &p * &v * cmdp.gamma;
    }
    Ok(v.iter().copied().collect())
}

/// `Q(s, a) = h(s, a) + γ·Σ_{s'} P(s'|s,a)·next_values(s')`, indexed `[s][a]`.
pub fn one_step_q(cmdp: &TabularCmdp, signal: Signal, next_values: &[f64]) -> Vec<Vec<f64>> {
    (0..cmdp.num_states)
        .map(|s| {
            (0..cmdp.num_actions)
                .map(|a| {
                    let ev: f64 = cmdp.row(s, a).iter().zip(next_values).map(|(p, v)| p * v).sum();
                    signal_value(cmdp, signal, s, a) + cmdp.gamma * ev
                })
                .collect()
        })
        .collect()
}

/// Exact action values of `policy`, indexed `[s][a]`.
pub fn q_values(cmdp: &TabularCmdp, policy: &TabularPolicy, signal: Signal) -> Result<Vec<Vec<f64>>> {
    let v = exact_value(cmdp, policy, signal)?;
    Ok(one_step_q(cmdp, signal, &v))
}

/// Discounted visitation of every state from `start`: row `start` of
/// `(I − γP^π)⁻¹`.
pub fn discounted_visitation(cmdp: &TabularCmdp, policy: &TabularPolicy, start: usize) -> Result<Vec<f64>> {
    policy.check(cmdp)?;
    if start >= cmdp.num_states {
        return Err(Error::InvalidInput("start state out of range".into()));
    }
    let mut e = DVector::zeros(cmdp.num_states);
    e[start] = 1.0;
    solve(resolvent_system(cmdp, policy).transpose(), e)
}

/// `L = (I − γP^{π_B})⁻¹ (c_i + ε·1)`.
pub fn lyapunov_function(cmdp: &TabularCmdp, baseline: &TabularPolicy, constraint: usize, epsilon: f64) -> Result<Vec<f64>> {
    baseline.check(cmdp)?;
    check_signal(cmdp, Signal::Cost(constraint))?;
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidInput(format!("budget {epsilon} must be nonnegative")));
    }
    let rhs = DVector::from_iterator(cmdp.num_states, cmdp.costs[constraint].iter().map(|c| c + epsilon));
    solve(resolvent_system(cmdp, baseline), rhs)
}

/// `ε̂ = (1 − γ)(d0 − D_{π_B}(s0))`.
///
/// Also checks that the discounted visitation from `s0` sums to
/// `1/(1 − γ)` within [`COST_TOL`].
pub fn max_budget(cmdp: &TabularCmdp, baseline: &TabularPolicy, constraint: usize) -> Result<f64> {
    let d = exact_value(cmdp, baseline, Signal::Cost(constraint))?[cmdp.start];
    let d0 = cmdp.thresholds[constraint];
    if d > d0 {
        return Err(Error::Precondition(format!("baseline cost {d} exceeds threshold {d0}")));
    }
    let total: f64 = discounted_visitation(cmdp, baseline, cmdp.start)?.iter().sum();
    let expected = 1.0 / (1.0 - cmdp.gamma);
    if (total - expected).abs() > COST_TOL {
        return Err(Error::NumericalBreakdown(format!("visitation sums to {total}, expected {expected}")));
    }
    Ok((1.0 - cmdp.gamma) * (d0 - d))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCertificate {
    pub lyapunov: Vec<f64>,
    pub epsilon_used: f64,
    /// `B_{π,c}[L](s) ≤ L(s) + 1e-12` for every `s`.
    pub pointwise_ok: bool,
    /// `L(s0) ≤ d0 + 1e-9`.
    pub start_ok: bool,
    /// Exact `D_π(s0)`.
    pub exact_cost: f64,
    /// Largest `B_{π,c}[L](s) − L(s)`.
    pub max_pointwise_excess: f64,
}

impl LyapunovCertificate {
    pub fn certified(&self) -> bool {
        self.pointwise_ok && self.start_ok
    }
}

/// `B_{π,c}[L](s) = c(s) + γ·Σ_a π(a|s)·Σ_{s'} P(s'|s,a)·L(s')`.
pub fn cost_bellman(cmdp: &TabularCmdp, policy: &TabularPolicy, constraint: usize, values: &[f64]) -> Vec<f64> {
    let pv = transition_matrix(cmdp, policy) * DVector::from_column_slice(values);
    (0..cmdp.num_states).map(|s| cmdp.cost(constraint, s) + cmdp.gamma * pv[s]).collect()
}

/// Checks `candidate` against the Lyapunov function `lyapunov` and records
/// its exact cost.
///
/// Returns [`Error::Precondition`] if a certified policy's exact cost
/// exceeds the threshold, which would contradict the safety theorem.
pub fn certify_policy(
    cmdp: &TabularCmdp,
    candidate: &TabularPolicy,
    constraint: usize,
    lyapunov: &[f64],
    epsilon: f64,
) -> Result<LyapunovCertificate> {
    candidate.check(cmdp)?;
    check_signal(cmdp, Signal::Cost(constraint))?;
    if lyapunov.len() != cmdp.num_states {
        return Err(Error::InvalidInput("Lyapunov vector has the wrong length".into()));
    }
    let b = cost_bellman(cmdp, candidate, constraint, lyapunov);
    let max_pointwise_excess = b.iter().zip(lyapunov).map(|(x, l)| x - l).fold(f64::NEG_INFINITY, f64::max);
    let d0 = cmdp.thresholds[constraint];
    let exact_cost = exact_value(cmdp, candidate, Signal::Cost(constraint))?[cmdp.start];
    let cert = LyapunovCertificate {
        lyapunov: lyapunov.to_vec(),
        epsilon_used: epsilon,
        pointwise_ok: max_pointwise_excess <= POINTWISE_TOL,
        start_ok: lyapunov[cmdp.start] <= d0 + COST_TOL,
        exact_cost,
        max_pointwise_excess,
    };
    if cert.certified() && exact_cost > d0 + COST_TOL {
        return Err(Error::Precondition(format!("certified policy has cost {exact_cost} above threshold {d0}")));
    }
    Ok(cert)
}

/// `max_{s,a} |Q_L(s,a) − Q^C(s,a) − ε̂/(1 − γ)|`, where
/// `Q_L(s,a) = c(s) + ε̂ + γ·Σ P(s'|s,a)·L(s')`.
pub fn q_l_offset_check(cmdp: &TabularCmdp, baseline: &TabularPolicy, constraint: usize, epsilon: f64) -> Result<f64> {
    let offset = epsilon / (1.0 - cmdp.gamma);
    let l = lyapunov_function(cmdp, baseline, constraint, epsilon)?;
    let q_l = one_step_q(cmdp, Signal::Cost(constraint), &l);
    let q_c = q_values(cmdp, baseline, Signal::Cost(constraint))?;
    Ok(q_l
        .iter()
        .flatten()
        .zip(q_c.iter().flatten())
        .map(|(ql, qc)| (ql + epsilon - qc - offset).abs())
        .fold(0.0, f64::max))
}

/// Random dense CMDP with one constraint and a deterministic baseline whose
/// threshold leaves a strictly positive budget.
pub fn random_instance<R: Rng + ?Sized>(num_states: usize, num_actions: usize, gamma: f64, rng: &mut R) -> Result<(TabularCmdp, TabularPolicy)> {
    let n = num_states;
    let k = num_actions;
    let mut transitions = Vec::with_capacity(n * k * n);
    for _ in 0..n * k {
        // Sparse-ish rows: each successor kept with probability 1/2.
        let mut row: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { rng.random::<f64>() } else { 0.0 }).collect();
        let hit = rng.random_range(0..n);
        row[hit] += rng.random::<f64>() + 1e-3;
        let z: f64 = row.iter().sum();
        let mut row: Vec<f64> = row.iter().map(|p| p / z).collect();
        // Absorb rounding so the row sums to one exactly enough.
        let drift: f64 = 1.0 - row.iter().sum::<f64>();
        row[hit] += drift;
        transitions.extend(row);
    }
    let rewards = (0..n * k).map(|_| rng.random::<f64>()).collect();
    let costs = vec![(0..n).map(|_| rng.random::<f64>()).collect()];
    let start = rng.random_range(0..n);
    let mut cmdp = TabularCmdp::new(n, k, transitions, rewards, costs, start, gamma, vec![0.0])?;
    let baseline = TabularPolicy::deterministic(&(0..n).map(|_| rng.random_range(0..k)).collect::<Vec<_>>(), k)?;
    let d = exact_value(&cmdp, &baseline, Signal::Cost(0))?[start];
    cmdp.thresholds[0] = d * (1.0 + rng.random_range(0.05..0.5)) + 1e-3;
    Ok((cmdp, baseline))
}

/// Rejection-samples `count` policies in the Lyapunov-induced set by
/// mixing random policies toward `baseline`, halving the mixing weight
/// until certified.
pub fn sample_certified_policies<R: Rng + ?Sized>(
    cmdp: &TabularCmdp,
    baseline: &TabularPolicy,
    constraint: usize,
    lyapunov: &[f64],
    epsilon: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(TabularPolicy, LyapunovCertificate)>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let target = TabularPolicy::random(cmdp.num_states, cmdp.num_actions, rng);
        let mut t = 1.0;
        loop {
            let candidate = baseline.mix(&target, t);
            let cert = certify_policy(cmdp, &candidate, constraint, lyapunov, epsilon)?;
            if cert.certified() {
                out.push((candidate, cert));
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::Precondition("no certified mixture found; is the baseline certified?".into()));
            }
        }
    }
    Ok(out)
}

/// Aggregate of the randomized oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    pub certified_policies: usize,
    /// Certified policies whose exact cost exceeds `d0 + 1e-9`.
    pub safety_exceptions: usize,
    /// Largest `D_π(s0) − d0` over certified policies.
    pub max_cost_excess: f64,
    pub max_offset_deviation: f64,
    /// Largest `L(s0) − d0` at the maximal budget.
    pub max_start_excess: f64,
    pub max_visitation_error: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.safety_exceptions == 0 && self.max_offset_deviation < 1e-10 && self.max_start_excess <= COST_TOL && self.max_visitation_error <= COST_TOL
    }
}

struct InstanceOutcome {
    certified: usize,
    exceptions: usize,
    cost_excess: f64,
    offset: f64,
    start_excess: f64,
    visitation: f64,
}

fn check_instance(seed: u64, index: usize, policies: usize) -> Result<InstanceOutcome> {
    let mut rng = derive(seed, Stream::Oracle, index as u64, 0);
    let n = rng.random_range(3..=25);
    let k = rng.random_range(2..=4);
    let gamma = rng.random_range(0.8..0.99);
    let (cmdp, baseline) = random_instance(n, k, gamma, &mut rng)?;
    let d0 = cmdp.thresholds[0];
    let eps = max_budget(&cmdp, &baseline, 0)?;
    let l = lyapunov_function(&cmdp, &baseline, 0, eps)?;
    let visitation: f64 = discounted_visitation(&cmdp, &baseline, cmdp.start)?.iter().sum();
    let offset = q_l_offset_check(&cmdp, &baseline, 0, rng.random_range(0.0..1.0))?.max(q_l_offset_check(&cmdp, &baseline, 0, eps)?);
    let mut certified = 0;
    let mut exceptions = 0;
    let mut cost_excess = f64::NEG_INFINITY;
    for _ in 0..policies {
        // certify_policy errors on a theorem violation; count it instead.
        let target = TabularPolicy::random(n, k, &mut rng);
        let mut t = 1.0;
        loop {
            let candidate = baseline.mix(&target, t);
            let b = cost_bellman(&cmdp, &candidate, 0, &l);
            let pointwise = b.iter().zip(&l).all(|(x, y)| x - y <= POINTWISE_TOL);
            if pointwise && l[cmdp.start] <= d0 + COST_TOL {
                let cost = exact_value(&cmdp, &candidate, Signal::Cost(0))?[cmdp.start];
                certified += 1;
                cost_excess = cost_excess.max(cost - d0);
                if cost > d0 + COST_TOL {
                    exceptions += 1;
                }
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(Error::Precondition("baseline is not certified by its own Lyapunov function".into()));
            }
        }
    }
    Ok(InstanceOutcome {
        certified,
        exceptions,
        cost_excess,
        offset,
        start_excess: l[cmdp.start] - d0,
        visitation: (visitation - 1.0 / (1.0 - gamma)).abs(),
    })
}

/// Runs the safety-theorem, offset-identity, budget and visitation checks
/// on `instances` random CMDPs with `policies` certified policies each.
pub fn run_oracle_suite(seed: u64, instances: usize, policies: usize, exec: Execution) -> Result<OracleReport> {
    let outcomes = exec.map_indexed(instances, |i| check_instance(seed, i, policies));
    let mut report = OracleReport {
        instances,
        certified_policies: 0,
        safety_exceptions: 0,
        max_cost_excess: f64::NEG_INFINITY,
        max_offset_deviation: 0.0,
        max_start_excess: f64::NEG_INFINITY,
        max_visitation_error: 0.0,
    };
    for o in outcomes {
        let o = o?;
        report.certified_policies += o.certified;
        report.safety_exceptions += o.exceptions;
        report.max_cost_excess = report.max_cost_excess.max(o.cost_excess);
        report.max_offset_deviation = report.max_offset_deviation.max(o.offset);
        report.max_start_excess = report.max_start_excess.max(o.start_excess);
        report.max_visitation_error = report.max_visitation_error.max(o.visitation);
    }
    Ok(report)
}
