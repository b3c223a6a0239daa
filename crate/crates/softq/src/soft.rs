//! Exact entropy-regularized quantities: softmax policy, soft value,
//! entropy, advantage, soft value iteration, and exact policy evaluation.
//!
//! These functions are the oracles the rest of the crate is checked
//! against, so everything here is computed in f64 with max-subtracted
//! logsumexp and direct linear solves (no sampling).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::env::TabularMDP;
use crate::error::{Error, Result};

const DIST_TOL: f64 = 1e-12;

/// A validated probability distribution over actions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDist {
    probs: Vec<f64>,
}

impl PolicyDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty distribution".into()));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::InvalidDistribution(format!("bad probability {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > DIST_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(Self { probs })
    }

    /// Skips validation; for distributions that are normalized by construction.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, a: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[a] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats, with the 0·log 0 = 0 convention.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// E_pi[x].
    pub fn expect(&self, x: &[f64]) -> f64 {
        self.probs.iter().zip(x).map(|(p, v)| p * v).sum()
    }
}

fn check_q(q: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(Error::ShapeMismatch("empty action-value vector".into()));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("action values".into()));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

/// The policy implied by action values: probs[a] proportional to exp(q[a]/epsilon),
/// computed with max-subtraction.
pub fn softmax_policy(q: &[f64], epsilon: f64) -> Result<PolicyDist> {
    check_q(q)?;
    check_epsilon(epsilon)?;
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = q.iter().map(|&v| ((v - m) / epsilon).exp()).collect();
    let z: f64 = e.iter().sum();
    for v in e.iter_mut() {
        *v /= z;
    }
    Ok(PolicyDist::from_normalized(e))
}

/// Soft state value epsilon * log sum_a exp(q[a]/epsilon), stable via
/// max-subtraction. Satisfies max(q) <= V <= max(q) + epsilon*ln(n).
pub fn soft_value(q: &[f64], epsilon: f64) -> Result<f64> {
    check_q(q)?;
    check_epsilon(epsilon)?;
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = q.iter().map(|&v| ((v - m) / epsilon).exp()).sum();
    Ok(m + epsilon * z.ln())
}

pub fn entropy(p: &PolicyDist) -> f64 {
    p.entropy()
}

/// Per-action advantage A[a] = q[a] - E_pi[q] - epsilon*H(pi).
/// For any pi and q, E_pi[A] = -epsilon*H(pi) exactly.
pub fn advantage(q: &[f64], pi: &PolicyDist, epsilon: f64) -> Result<Vec<f64>> {
    check_q(q)?;
    if q.len() != pi.len() {
        return Err(Error::ShapeMismatch(format!(
            "advantage: {} action values vs {} probabilities",
            q.len(),
            pi.len()
        )));
    }
    let baseline = pi.expect(q) + epsilon * pi.entropy();
    Ok(q.iter().map(|&v| v - baseline).collect())
}

#[derive(Debug, Clone)]
pub struct SoftViResult {
    /// Optimal soft action values, indexed [state][action]; terminal rows are 0.
    pub q: Vec<Vec<f64>>,
    pub iters: usize,
}

/// Iterates the soft Bellman backup Q(s,a) <- r(s,a) + gamma * sum_s' P(s'|s,a) * V(s')
/// with V(s') = epsilon*logsumexp(Q(s',.)/epsilon) (0 at terminals) until the
/// sup-norm residual drops below `tol`.
///
/// gamma = 1 is only accepted on MDPs where every policy terminates.
pub fn soft_value_iteration(
    mdp: &TabularMDP,
    epsilon: f64,
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Result<SoftViResult> {
    check_epsilon(epsilon)?;
    check_gamma(mdp, gamma)?;
    if !(tol > 0.0) {
        return Err(Error::Config("tol must be positive".into()));
    }
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let mut q = vec![vec![0.0; na]; ns];
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iters {
        let mut v = vec![0.0; ns];
        for s in 0..ns {
            if !mdp.is_terminal(s) {
                v[s] = soft_value(&q[s], epsilon)?;
            }
        }
        let mut next = vec![vec![0.0; na]; ns];
        residual = 0.0;
        for s in 0..ns {
            if mdp.is_terminal(s) {
                continue;
            }
            for a in 0..na {
                let cont: f64 = mdp
                    .transition_row(s, a)
                    .iter()
                    .zip(&v)
                    .map(|(&p, &val)| p * val)
                    .sum();
                next[s][a] = mdp.r(s, a) + gamma * cont;
                residual = residual.max((next[s][a] - q[s][a]).abs());
            }
        }
        q = next;
        if residual <= tol {
            return Ok(SoftViResult { q, iters: iter });
        }
    }
    Err(Error::NoConvergence {
        residual,
        iters: max_iters,
    })
}

/// How an evaluation was discounted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EvalMode {
    Discounted(f64),
    Undiscounted,
}

/// Exact policy evaluation output.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Entropy-regularized return: expected discounted sum of r + epsilon*h,
    /// with the entropy bonus counted at every visited state from the start.
    pub eta: f64,
    /// Same evaluation with the entropy term set to zero.
    pub return_only: f64,
    /// Entropy-inclusive state values V(s); terminals are 0.
    pub per_state_values: Vec<f64>,
    pub mode: EvalMode,
}

fn check_gamma(mdp: &TabularMDP, gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "gamma must be in (0, 1], got {gamma}"
        )));
    }
    if gamma == 1.0 && !mdp.all_policies_terminate() {
        return Err(Error::Config(
            "gamma = 1 requires an MDP on which every policy terminates".into(),
        ));
    }
    Ok(())
}

fn check_policy(mdp: &TabularMDP, policy: &[PolicyDist]) -> Result<()> {
    if policy.len() != mdp.n_states() {
        return Err(Error::ShapeMismatch(format!(
            "policy has {} states, MDP has {}",
            policy.len(),
            mdp.n_states()
        )));
    }
    for (s, pi) in policy.iter().enumerate() {
        if pi.len() != mdp.n_actions() {
            return Err(Error::ShapeMismatch(format!(
                "policy at state {s} has wrong arity"
            )));
        }
    }
    Ok(())
}

/// Solves V(s) = epsilon*h(s) + sum_a pi(a|s) [r(s,a) + gamma * sum_s' P V(s')]
/// on non-terminal states (terminals pinned to 0) and returns both the
/// entropy-regularized and reward-only evaluations of the start distribution.
///
/// Specific non-terminating policies at gamma = 1 surface as a singular
/// system; the gamma = 1 precondition itself only demands a policy-independent
/// terminating structure for eta to be finite.
pub fn exact_soft_policy_eval(
    mdp: &TabularMDP,
    policy: &[PolicyDist],
    epsilon: f64,
    gamma: f64,
) -> Result<EvalReport> {
    check_epsilon(epsilon)?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "gamma must be in (0, 1], got {gamma}"
        )));
    }
    check_policy(mdp, policy)?;
    let v = solve_values(mdp, policy, epsilon, gamma)?;
    let v0 = solve_values(mdp, policy, 0.0, gamma)?;
    let eta = mdp
        .initial_dist()
        .iter()
        .zip(&v)
        .map(|(&d, &val)| d * val)
        .sum();
    let return_only = mdp
        .initial_dist()
        .iter()
        .zip(&v0)
        .map(|(&d, &val)| d * val)
        .sum();
    let mode = if gamma < 1.0 {
        EvalMode::Discounted(gamma)
    } else {
        EvalMode::Undiscounted
    };
    Ok(EvalReport {
        eta,
        return_only,
        per_state_values: v,
        mode,
    })
}

/// Linear Bellman solve for fixed-policy values; `epsilon = 0` evaluates
/// plain reward-only returns.
fn solve_values(
    mdp: &TabularMDP,
    policy: &[PolicyDist],
    epsilon: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let nt = mdp.non_terminal_states();
    let mut index = vec![usize::MAX; mdp.n_states()];
    for (i, &s) in nt.iter().enumerate() {
        index[s] = i;
    }
    let n = nt.len();
    if n == 0 {
        return Ok(vec![0.0; mdp.n_states()]);
    }
    let mut a_mat = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for (i, &s) in nt.iter().enumerate() {
        let pi = &policy[s];
        b[i] = epsilon * pi.entropy();
        for (act, &pa) in pi.probs().iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            b[i] += pa * mdp.r(s, act);
            for (j, &t) in nt.iter().enumerate() {
                a_mat[(i, j)] -= gamma * pa * mdp.p(s, act, t);
            }
        }
    }
    let lu = a_mat.lu();
    let x = lu
        .solve(&b)
        .ok_or_else(|| Error::SingularSystem("policy evaluation Bellman system".into()))?;
    let mut v = vec![0.0; mdp.n_states()];
    for (i, &s) in nt.iter().enumerate() {
        v[s] = x[i];
    }
    Ok(v)
}

/// Exact per-state action values of a fixed policy:
/// Q(s,a) = r(s,a) + gamma * sum_s' P(s'|s,a) V(s'), with the entropy bonus
/// entering from the next step onward through V.
pub fn exact_q_pi(
    mdp: &TabularMDP,
    policy: &[PolicyDist],
    epsilon: f64,
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    check_epsilon(epsilon)?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "gamma must be in (0, 1], got {gamma}"
        )));
    }
    check_policy(mdp, policy)?;
    let v = solve_values(mdp, policy, epsilon, gamma)?;
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let mut q = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..na {
            let cont: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&v)
                .map(|(&p, &val)| p * val)
                .sum();
            q[s][a] = mdp.r(s, a) + gamma * cont;
        }
    }
    // Self-consistency: V(s) must equal E_pi[Q(s,.)] + epsilon*h(s).
    for s in 0..ns {
        if mdp.is_terminal(s) {
            continue;
        }
        let recon = policy[s].expect(&q[s]) + epsilon * policy[s].entropy();
        if (recon - v[s]).abs() > 1e-10 {
            return Err(Error::Internal(format!(
                "value/action-value inconsistency at state {s}: {} vs {}",
                recon, v[s]
            )));
        }
    }
    Ok(q)
}
