//! Numerical verification of every identity the training gradients rely on:
//! the policy-evaluation-with-demonstrations identities, the decomposition of
//! the soft-Q gradient into a policy-gradient and a value-update term, the
//! behavior-cloning equivalence of the undetached demonstration gradient, the
//! logsumexp (IRL) form of the gated Q update, and finite-difference checks
//! of every analytic gradient. Expectations are exact (enumeration or linear
//! solves), never sampled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::DemoSample;
use crate::env::{build_layered_mdp, TabularMDP, Transition};
use crate::losses::{
    bc_grad, bc_loss_value, demo_policy_grad_frozen, demo_q_grad_frozen, dqfd_loss_value,
    dqfd_margin_grad, l_pi_value, l_q_value, soft_q_grad, soft_q_loss_value,
    undetached_advantage_grad,
};
use crate::model::{finite_diff_grad, max_rel_error, GradAccumulator, QModel, QModelKind};
use crate::soft::{exact_q_pi, exact_soft_policy_eval, soft_value, softmax_policy, PolicyDist};

/// Outcome of one verification check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub n_cases: usize,
    pub passed: bool,
    pub details: Vec<String>,
}

impl CheckReport {
    fn new(
        name: &str,
        max_abs_error: f64,
        tolerance: f64,
        n_cases: usize,
        details: Vec<String>,
    ) -> Self {
        Self {
            name: name.to_string(),
            max_abs_error,
            tolerance,
            n_cases,
            passed: max_abs_error <= tolerance,
            details,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{:<32} {} max_err {:.3e} tol {:.0e} ({} cases)",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_abs_error,
            self.tolerance,
            self.n_cases
        )
    }
}

fn random_policy<R: Rng>(mdp: &TabularMDP, rng: &mut R) -> Vec<PolicyDist> {
    (0..mdp.n_states())
        .map(|_| {
            let raw: Vec<f64> = (0..mdp.n_actions())
                .map(|_| rng.gen_range(0.05..1.0))
                .collect();
            let sum: f64 = raw.iter().sum();
            PolicyDist::new(raw.into_iter().map(|x| x / sum).collect()).expect("normalized")
        })
        .collect()
}

/// Exhaustive trajectory enumeration of E_tau[sum_t f(s_t, a_t)] on a
/// terminating MDP: every action branch and stochastic branch is walked with
/// its exact probability.
pub fn enumerate_expected_sum<F>(mdp: &TabularMDP, policy: &[PolicyDist], f: &F) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    fn rec<F: Fn(usize, usize) -> f64>(
        mdp: &TabularMDP,
        policy: &[PolicyDist],
        f: &F,
        s: usize,
        prob: f64,
        acc: f64,
        total: &mut f64,
        depth: usize,
    ) {
        if mdp.is_terminal(s) {
            *total += prob * acc;
            return;
        }
        assert!(depth < 64, "enumeration requires a terminating MDP");
        for (a, &pa) in policy[s].probs().iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let term = f(s, a);
            for t in 0..mdp.n_states() {
                let p = mdp.p(s, a, t);
                if p == 0.0 {
                    continue;
                }
                rec(
                    mdp,
                    policy,
                    f,
                    t,
                    prob * pa * p,
                    acc + term,
                    total,
                    depth + 1,
                );
            }
        }
    }
    let mut total = 0.0;
    for (s0, &d) in mdp.initial_dist().iter().enumerate() {
        if d > 0.0 {
            rec(mdp, policy, f, s0, d, 0.0, &mut total, 0);
        }
    }
    total
}

pub(crate) struct DemoEvalCase {
    /// Signed residual of the eta identity.
    pub err_eta: f64,
    /// Signed residual of the reward identity.
    pub err_return: f64,
    pub layers: usize,
}

pub(crate) fn policy_eval_with_demos_cases(n_mdps: usize, seed: u64) -> Vec<DemoEvalCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n_mdps);
    for i in 0..n_mdps {
        let layers = rng.gen_range(1..=3);
        let spl = rng.gen_range(1..=3);
        // Case 1 pins the single-action degeneracy (all entropy terms zero).
        let actions = if i == 1 { 1 } else { rng.gen_range(1..=3) };
        let mdp = build_layered_mdp(layers, spl, actions, rng.gen()).expect("valid dims");
        let epsilon = rng.gen_range(0.05..0.5);
        let pi = random_policy(&mdp, &mut rng);
        // Case 0 pins the expert-equals-agent degeneracy.
        let pi_star = if i == 0 {
            pi.clone()
        } else {
            random_policy(&mdp, &mut rng)
        };

        let q_pi = exact_q_pi(&mdp, &pi, epsilon, 1.0).expect("layered MDP evaluates");
        let advantage_of = |s: usize, a: usize| {
            let v = pi[s].expect(&q_pi[s]) + epsilon * pi[s].entropy();
            q_pi[s][a] - v
        };
        let eta_pi = exact_soft_policy_eval(&mdp, &pi, epsilon, 1.0).unwrap();
        let eta_star = exact_soft_policy_eval(&mdp, &pi_star, epsilon, 1.0).unwrap();

        let e_star_adv = enumerate_expected_sum(&mdp, &pi_star, &advantage_of);
        let e_star_ent = enumerate_expected_sum(&mdp, &pi_star, &|s, _| pi_star[s].entropy());
        let e_star_reward = enumerate_expected_sum(&mdp, &pi_star, &|s, a| mdp.r(s, a));
        let e_pi_reward = enumerate_expected_sum(&mdp, &pi, &|s, a| mdp.r(s, a));
        let e_pi_ent = enumerate_expected_sum(&mdp, &pi, &|s, _| pi[s].entropy());

        // eta(pi) = eta(pi*) - E_{pi*}[ sum A(s*,a*) + eps*h*(s*) ]
        let err_eta = eta_pi.eta - (eta_star.eta - (e_star_adv + epsilon * e_star_ent));
        // E_pi[sum r] = E_{pi*}[sum r] - ( E_{pi*}[sum A] + eps * E_pi[sum h] )
        let err_return = e_pi_reward - (e_star_reward - (e_star_adv + epsilon * e_pi_ent));
        cases.push(DemoEvalCase {
            err_eta,
            err_return,
            layers,
        });
    }
    cases
}

/// Both policy-evaluation-with-demonstrations identities, on random layered
/// MDPs, with all expectations computed by exhaustive trajectory enumeration
/// against values from the exact linear-solve oracles.
pub fn check_policy_eval_with_demos(n_mdps: usize, seed: u64) -> CheckReport {
    let cases = policy_eval_with_demos_cases(n_mdps, seed);
    let mut max_err: f64 = 0.0;
    let mut worst = 0;
    for (i, c) in cases.iter().enumerate() {
        let e = c.err_eta.abs().max(c.err_return.abs());
        if e > max_err {
            max_err = e;
            worst = i;
        }
    }
    let details = vec![format!(
        "worst case {} (layers {}): eta-identity err {:.3e}, reward-identity err {:.3e}",
        worst, cases[worst].layers, cases[worst].err_eta, cases[worst].err_return
    )];
    CheckReport::new(
        "policy_eval_with_demos",
        max_err,
        1e-8,
        cases.len(),
        details,
    )
}

/// Both sides of the soft-Q gradient decomposition for a tabular model on a
/// small fixture MDP, in exact expectation over states, on-policy actions and
/// model successors. Returns the flat gradients and the mean value residual.
fn decomposition_sides(
    mdp: &TabularMDP,
    model: &QModel,
    epsilon: f64,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>, f64) {
    let states = mdp.non_terminal_states();
    let d = 1.0 / states.len() as f64;
    let mut lhs = GradAccumulator::for_model(model);
    let mut rhs = GradAccumulator::for_model(model);
    let mut delta_v_mean = 0.0;
    for &s in &states {
        let q = model.forward(s);
        let pi = softmax_policy(&q, epsilon).unwrap();
        let v_soft = soft_value(&q, epsilon).unwrap();
        let log_pi: Vec<f64> = q.iter().map(|&x| (x - v_soft) / epsilon).collect();
        let h = pi.entropy();
        // Expected TD target per action, with the bootstrap cut at terminals.
        let y_bar: Vec<f64> = (0..mdp.n_actions())
            .map(|a| {
                let mut y = mdp.r(s, a);
                for t in 0..mdp.n_states() {
                    let p = mdp.p(s, a, t);
                    if p > 0.0 && !mdp.is_terminal(t) {
                        y += gamma * p * soft_value(&model.forward(t), epsilon).unwrap();
                    }
                }
                y
            })
            .collect();
        let v_target = pi.expect(&y_bar) + epsilon * h;
        let delta_v = v_soft - v_target;
        delta_v_mean += delta_v * d;

        let e_y = pi.expect(&y_bar);
        let mut adj_lhs = vec![0.0; q.len()];
        let mut adj_rhs = vec![0.0; q.len()];
        for j in 0..q.len() {
            let p = pi.probs()[j];
            // TD semi-gradient: E_a pi(a) (Q(a) - y_bar(a)) grad Q(a).
            adj_lhs[j] = d * p * (q[j] - y_bar[j]);
            // Policy-gradient term with the TD estimate standing in for Q,
            // plus the value-update term toward E[y] + eps*h.
            let dlog = (p * y_bar[j] - p * e_y) / epsilon;
            let dh = -(p / epsilon) * (log_pi[j] + h);
            adj_rhs[j] = d * (-epsilon * (dlog + epsilon * dh) + delta_v * p);
        }
        model.backward(s, &adj_lhs, &mut lhs).unwrap();
        model.backward(s, &adj_rhs, &mut rhs).unwrap();
    }
    (lhs.grad, rhs.grad, delta_v_mean)
}

/// The soft-Q gradient equals a policy gradient with entropy regularization
/// plus a squared value-error gradient, in exact expectation; checked over
/// random tabular parameter draws on a fixture MDP, with the soft-optimal
/// fixed point as the first draw.
pub fn check_soft_q_decomposition(
    mdp: &TabularMDP,
    n_param_draws: usize,
    seed: u64,
) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epsilon = 0.1;
    let gamma = 0.9;
    let mut max_err: f64 = 0.0;
    let mut details = Vec::new();
    for i in 0..n_param_draws {
        let mut model = QModel::tabular(mdp.n_states(), mdp.n_actions());
        if i == 0 {
            let vi = crate::soft::soft_value_iteration(mdp, epsilon, gamma, 1e-13, 100_000)
                .expect("fixture converges");
            let flat: Vec<f64> = vi.q.iter().flatten().copied().collect();
            model.set_params(&flat).unwrap();
        } else {
            let p: Vec<f64> = (0..model.n_params())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            model.set_params(&p).unwrap();
        }
        let (lhs, rhs, delta_v) = decomposition_sides(mdp, &model, epsilon, gamma);
        let err = lhs
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if i == 0 {
            let norm = lhs.iter().map(|x| x.abs()).fold(0.0, f64::max);
            details.push(format!(
                "fixed point: |gradient|_inf {:.3e}, mean delta_V {:.3e}",
                norm, delta_v
            ));
        }
        max_err = max_err.max(err);
    }
    CheckReport::new(
        "soft_q_grad_decomposition",
        max_err,
        1e-6,
        n_param_draws,
        details,
    )
}

fn random_model<R: Rng>(
    kind: QModelKind,
    n_states: usize,
    n_actions: usize,
    rng: &mut R,
) -> QModel {
    match kind {
        QModelKind::Tabular => {
            let mut m = QModel::tabular(n_states, n_actions);
            let p: Vec<f64> = (0..m.n_params())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            m.set_params(&p).unwrap();
            m
        }
        QModelKind::Mlp => QModel::mlp(n_states, n_actions, 10, rng.gen()),
    }
}

/// The undetached demonstration gradient of the mean advantage equals the
/// cross-entropy (behavior cloning) gradient, per sample, on both model kinds.
pub fn check_bc_equivalence(n_cases: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for i in 0..n_cases {
        let kind = if i % 2 == 0 {
            QModelKind::Tabular
        } else {
            QModelKind::Mlp
        };
        let n_states = rng.gen_range(2..5);
        let n_actions = rng.gen_range(2..5);
        let mut model = random_model(kind, n_states, n_actions, &mut rng);
        if i == 2 {
            // Saturated policy: both gradients vanish together.
            let mut m = QModel::tabular(2, 2);
            m.set_params(&[20.0, -20.0, 0.0, 0.0]).unwrap();
            model = m;
        }
        let state = rng.gen_range(0..model.n_states());
        let action = rng.gen_range(0..model.n_actions());
        let epsilon = rng.gen_range(0.05..0.5);
        let demo = vec![DemoSample { state, action }];
        let mut adv = GradAccumulator::for_model(&model);
        undetached_advantage_grad(&model, &demo, epsilon, &mut adv, 1.0).unwrap();
        let mut bc = GradAccumulator::for_model(&model);
        bc_grad(&model, &demo, epsilon, &mut bc).unwrap();
        let err = adv
            .grad
            .iter()
            .zip(&bc.grad)
            .map(|(a, b)| (a + b).abs())
            .fold(0.0, f64::max);
        max_err = max_err.max(err);
    }
    CheckReport::new("bc_equivalence", max_err, 1e-8, n_cases, vec![])
}

/// The gradient of the soft state value eps*logsumexp(Q/eps) equals the
/// frozen-policy mixture of Q gradients at the detached point, which is what
/// makes the gated Q update an IRL-style update. The two routes are computed
/// with different arithmetic.
pub fn check_q_update_irl_form(n_cases: usize, seed: u64, kind: QModelKind) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for i in 0..n_cases {
        let n_states = rng.gen_range(2..5);
        let n_actions = if i == 0 { 1 } else { rng.gen_range(2..5) };
        let model = random_model(kind, n_states, n_actions, &mut rng);
        let frozen = model.clone();
        let state = rng.gen_range(0..n_states);
        let epsilon = rng.gen_range(0.05..0.5);

        // Route 1: d/dq of the soft value, via exp((q - V)/eps).
        let q = model.forward(state);
        let v = soft_value(&q, epsilon).unwrap();
        let adj1: Vec<f64> = q.iter().map(|&x| ((x - v) / epsilon).exp()).collect();
        let mut g1 = GradAccumulator::for_model(&model);
        model.backward(state, &adj1, &mut g1).unwrap();

        // Route 2: the detached copy's softmax policy weighting grad Q.
        let adj2 = softmax_policy(&frozen.forward(state), epsilon).unwrap();
        let mut g2 = GradAccumulator::for_model(&model);
        model.backward(state, adj2.probs(), &mut g2).unwrap();

        let err = g1
            .grad
            .iter()
            .zip(&g2.grad)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        max_err = max_err.max(err);
    }
    let tol = match kind {
        QModelKind::Tabular => 1e-10,
        QModelKind::Mlp => 1e-8,
    };
    CheckReport::new(
        &format!("q_update_irl_form_{kind}"),
        max_err,
        tol,
        n_cases,
        vec![],
    )
}

fn fd_fixture_batches(model: &QModel, open_gate: bool) -> (Vec<DemoSample>, Vec<Transition>) {
    // Demo actions at the per-state argmax keep the constraint satisfied
    // (log pi(argmax) + h >= 0 per state); argmin actions violate it.
    let pick = |s: usize| {
        let q = model.forward(s);
        let mut best = 0;
        for (a, &v) in q.iter().enumerate() {
            let better = if open_gate { v < q[best] } else { v > q[best] };
            if better {
                best = a;
            }
        }
        best
    };
    let demo: Vec<DemoSample> = (0..model.n_states())
        .map(|s| DemoSample {
            state: s,
            action: pick(s),
        })
        .collect();
    let replay: Vec<Transition> = (0..model.n_states())
        .map(|s| Transition {
            state: s,
            action: 0,
            reward: if s % 2 == 0 { 0.4 } else { -0.3 },
            next_state: (s + 1) % model.n_states(),
            done: s + 1 == model.n_states(),
        })
        .collect();
    (demo, replay)
}

/// Central finite differences against every analytic gradient, honoring each
/// loss's stop-gradient contract (the frozen factor stays at the base
/// parameters while the live ones are perturbed).
pub fn check_all_gradients_fd(seed: u64, kind: QModelKind) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epsilon = 0.1;
    let gamma = 0.9;
    let h = 1e-5;
    let n_states = 4;
    let n_actions = 3;
    let model = random_model(kind, n_states, n_actions, &mut rng);
    let target = random_model(kind, n_states, n_actions, &mut rng);
    let (demo_closed, replay) = fd_fixture_batches(&model, false);
    let (demo_open, _) = fd_fixture_batches(&model, true);

    let mut max_err: f64 = 0.0;
    let mut details = Vec::new();
    let mut run = |name: &str, analytic: &[f64], fd: &[f64]| {
        let err = max_rel_error(analytic, fd, 1e-8);
        details.push(format!("{name}: rel err {err:.3e}"));
        max_err = max_err.max(err);
    };

    // Soft-Q semi-gradient (targets frozen in the target network).
    {
        let mut acc = GradAccumulator::for_model(&model);
        soft_q_grad(&model, &target, &replay, epsilon, gamma, &mut acc).unwrap();
        let mut probe = model.clone();
        let fd = finite_diff_grad(
            &mut probe,
            |m| soft_q_loss_value(m, &target, &replay, epsilon, gamma).unwrap(),
            h,
        )
        .unwrap();
        run("soft_q", &acc.grad, &fd);
    }
    // Decoupled policy loss at the detached point.
    {
        let frozen = model.clone();
        let mut acc = GradAccumulator::for_model(&model);
        demo_policy_grad_frozen(
            &model,
            &frozen,
            &demo_closed,
            &replay,
            epsilon,
            &mut acc,
            1.0,
        )
        .unwrap();
        let mut probe = model.clone();
        let fd = finite_diff_grad(
            &mut probe,
            |m| l_pi_value(m, &frozen, &demo_closed, &replay, epsilon).unwrap(),
            h,
        )
        .unwrap();
        run("demo_policy", &acc.grad, &fd);
    }
    // Gated Q loss, open and closed.
    {
        let frozen = model.clone();
        let (_, alpha, gate) = {
            let mut acc = GradAccumulator::for_model(&model);
            demo_q_grad_frozen(&model, &frozen, &demo_open, &replay, epsilon, &mut acc, 1.0)
                .unwrap()
        };
        assert!(gate && alpha < 0.0, "argmin demos must open the gate");
        let mut acc = GradAccumulator::for_model(&model);
        demo_q_grad_frozen(&model, &frozen, &demo_open, &replay, epsilon, &mut acc, 1.0).unwrap();
        let mut probe = model.clone();
        let fd = finite_diff_grad(
            &mut probe,
            |m| l_q_value(m, &frozen, &demo_open, &replay, epsilon).unwrap(),
            h,
        )
        .unwrap();
        run("demo_q_gate_open", &acc.grad, &fd);

        let mut acc2 = GradAccumulator::for_model(&model);
        let (l_q, alpha2, gate2) = demo_q_grad_frozen(
            &model,
            &frozen,
            &demo_closed,
            &replay,
            epsilon,
            &mut acc2,
            1.0,
        )
        .unwrap();
        assert!(
            !gate2 && alpha2 >= 0.0 && l_q == 0.0,
            "argmax demos must close the gate"
        );
        let mut probe = model.clone();
        let fd2 = finite_diff_grad(
            &mut probe,
            |m| l_q_value(m, &frozen, &demo_closed, &replay, epsilon).unwrap(),
            h,
        )
        .unwrap();
        run("demo_q_gate_closed", &acc2.grad, &fd2);
    }
    // Behavior cloning.
    {
        let mut acc = GradAccumulator::for_model(&model);
        bc_grad(&model, &demo_closed, epsilon, &mut acc).unwrap();
        let mut probe = model.clone();
        let fd = finite_diff_grad(
            &mut probe,
            |m| bc_loss_value(m, &demo_closed, epsilon).unwrap(),
            h,
        )
        .unwrap();
        run("bc", &acc.grad, &fd);
    }
    // DQfD margin plus TD term.
    {
        let margin = 0.8;
        let mut acc = GradAccumulator::for_model(&model);
        dqfd_margin_grad(
            &model, &target, &demo_open, &replay, margin, epsilon, gamma, &mut acc,
        )
        .unwrap();
        let mut probe = model.clone();
        let fd = finite_diff_grad(
            &mut probe,
            |m| dqfd_loss_value(m, &target, &demo_open, &replay, margin, epsilon, gamma).unwrap(),
            h,
        )
        .unwrap();
        run("dqfd_margin", &acc.grad, &fd);
    }

    let tol = match kind {
        QModelKind::Tabular => 1e-6,
        QModelKind::Mlp => 1e-5,
    };
    CheckReport::new(&format!("gradients_fd_{kind}"), max_err, tol, 6, details)
}

/// The default verification suite; deterministic given `seed`.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    let fixture = build_layered_mdp(1, 2, 2, 0xF1C).expect("fixture dims");
    vec![
        check_policy_eval_with_demos(50, seed),
        check_soft_q_decomposition(&fixture, 20, seed.wrapping_add(1)),
        check_bc_equivalence(120, seed.wrapping_add(2)),
        check_q_update_irl_form(100, seed.wrapping_add(3), QModelKind::Tabular),
        check_q_update_irl_form(100, seed.wrapping_add(4), QModelKind::Mlp),
        check_all_gradients_fd(seed.wrapping_add(5), QModelKind::Tabular),
        check_all_gradients_fd(seed.wrapping_add(6), QModelKind::Mlp),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_eval_identities_hold_on_random_mdps() {
        let report = check_policy_eval_with_demos(50, 7);
        assert!(report.passed, "{}", report.summary_line());
    }

    #[test]
    fn demo_eval_identity_error_is_unbiased_across_sizes() {
        // Errors scale with float rounding, not with MDP size: group the
        // signed eta-identity residuals by layer count.
        let cases = policy_eval_with_demos_cases(150, 11);
        for layers in 1..=3 {
            let errs: Vec<f64> = cases
                .iter()
                .filter(|c| c.layers == layers)
                .map(|c| c.err_eta)
                .collect();
            assert!(!errs.is_empty());
            let signed_mean: f64 = errs.iter().sum::<f64>() / errs.len() as f64;
            assert!(
                signed_mean.abs() <= 1e-10,
                "layers {layers}: mean {signed_mean:e}"
            );
            assert!(errs.iter().all(|e| e.abs() <= 1e-8));
        }
    }

    #[test]
    fn expert_equals_agent_case_is_tight() {
        // Case 0 pins pi* = pi; both identities then reduce to
        // E_pi[sum A] + eps E_pi[sum h] = 0.
        let cases = policy_eval_with_demos_cases(1, 3);
        assert!(cases[0].err_eta.abs() <= 1e-10);
        assert!(cases[0].err_return.abs() <= 1e-10);
    }

    #[test]
    fn decomposition_holds_on_fixture() {
        let fixture = build_layered_mdp(1, 2, 2, 0xF1C).unwrap();
        let report = check_soft_q_decomposition(&fixture, 20, 5);
        assert!(report.passed, "{}", report.summary_line());
        // At the soft-optimal fixed point both sides vanish.
        assert!(report.details[0].contains("fixed point"));
    }

    #[test]
    fn decomposition_fixed_point_is_zero() {
        let fixture = build_layered_mdp(1, 2, 2, 0xF1C).unwrap();
        let vi = crate::soft::soft_value_iteration(&fixture, 0.1, 0.9, 1e-13, 100_000).unwrap();
        let mut model = QModel::tabular(fixture.n_states(), fixture.n_actions());
        let flat: Vec<f64> = vi.q.iter().flatten().copied().collect();
        model.set_params(&flat).unwrap();
        let (lhs, rhs, _) = decomposition_sides(&fixture, &model, 0.1, 0.9);
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!(a.abs() <= 1e-6 && b.abs() <= 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn decomposition_is_shift_covariant() {
        // Adding a constant to all Q values shifts both sides equally.
        let fixture = build_layered_mdp(1, 2, 2, 0xF1C).unwrap();
        let mut model = QModel::tabular(fixture.n_states(), fixture.n_actions());
        let p: Vec<f64> = (0..model.n_params())
            .map(|i| 0.3 * i as f64 - 0.7)
            .collect();
        model.set_params(&p).unwrap();
        let (lhs0, rhs0, _) = decomposition_sides(&fixture, &model, 0.1, 0.9);
        let shifted: Vec<f64> = p.iter().map(|x| x + 2.5).collect();
        model.set_params(&shifted).unwrap();
        let (lhs1, rhs1, _) = decomposition_sides(&fixture, &model, 0.1, 0.9);
        for i in 0..lhs0.len() {
            let dl = lhs1[i] - lhs0[i];
            let dr = rhs1[i] - rhs0[i];
            assert!((dl - dr).abs() <= 1e-8, "component {i}: {dl} vs {dr}");
        }
    }

    #[test]
    fn bc_equivalence_holds() {
        let report = check_bc_equivalence(120, 9);
        assert!(report.passed, "{}", report.summary_line());
    }

    #[test]
    fn irl_form_holds_both_kinds() {
        for kind in [QModelKind::Tabular, QModelKind::Mlp] {
            let report = check_q_update_irl_form(100, 13, kind);
            assert!(report.passed, "{}", report.summary_line());
        }
    }

    #[test]
    fn irl_form_single_action_is_exact() {
        // With one action both routes equal grad Q(s, a0).
        let report = check_q_update_irl_form(1, 13, QModelKind::Tabular);
        assert!(report.max_abs_error <= 1e-12);
    }

    #[test]
    fn gradients_match_fd_both_kinds() {
        for kind in [QModelKind::Tabular, QModelKind::Mlp] {
            let report = check_all_gradients_fd(17, kind);
            assert!(
                report.passed,
                "{}\n{}",
                report.summary_line(),
                report.details.join("\n")
            );
        }
    }

    #[test]
    fn suite_is_deterministic() {
        let a = run_all(21);
        let b = run_all(21);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_abs_error.to_bits(), y.max_abs_error.to_bits());
        }
        assert!(a.iter().all(|r| r.passed));
    }
}
