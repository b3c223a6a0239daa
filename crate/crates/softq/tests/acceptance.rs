//! Acceptance suite: one test per criterion (the pretraining-behavior
//! criteria share one batch of runs). Each criterion prints a PASS/FAIL line;
//! run with `cargo test --test acceptance -- --nocapture` to see them.

use std::time::Instant;

use softq::data::{demo_save, generate_demos};
use softq::env::{build_layered_mdp, fixture, TabularMDP};
use softq::losses::{pretrain_grad, soft_q_grad};
use softq::model::{GradAccumulator, QModel, QModelKind};
use softq::soft::{
    exact_soft_policy_eval, soft_value, soft_value_iteration, softmax_policy, PolicyDist,
};
use softq::trainer::{train, Algorithm, MetricsRow, TrainConfig};
use softq::verify::{
    check_all_gradients_fd, check_bc_equivalence, check_policy_eval_with_demos,
    check_q_update_irl_form, check_soft_q_decomposition, enumerate_expected_sum,
};

fn report(criterion: &str, passed: bool, detail: &str) -> bool {
    println!(
        "criterion {criterion}: {} — {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    passed
}

#[test]
fn criterion_1_identity_suite() {
    let t0 = Instant::now();
    let fixture_mdp = build_layered_mdp(1, 2, 2, 0xF1C).unwrap();
    let checks = vec![
        check_policy_eval_with_demos(50, 1),
        check_soft_q_decomposition(&fixture_mdp, 20, 2),
        check_bc_equivalence(120, 3),
        check_q_update_irl_form(100, 4, QModelKind::Tabular),
        check_q_update_irl_form(100, 5, QModelKind::Mlp),
    ];
    let elapsed = t0.elapsed();
    let all = checks.iter().all(|c| c.passed);
    let within_time = elapsed.as_secs_f64() < 60.0;
    let detail = format!(
        "{} in {:.2?}",
        checks
            .iter()
            .map(|c| c.summary_line())
            .collect::<Vec<_>>()
            .join(" | "),
        elapsed
    );
    let ok = report("1 (identity suite)", all && within_time, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_2_gradient_oracle_suite() {
    let t0 = Instant::now();
    let tab = check_all_gradients_fd(11, QModelKind::Tabular);
    let mlp = check_all_gradients_fd(12, QModelKind::Mlp);
    let elapsed = t0.elapsed();
    let within_time = elapsed.as_secs_f64() < 120.0;
    let detail = format!(
        "{} | {} in {elapsed:.2?}",
        tab.summary_line(),
        mlp.summary_line()
    );
    let ok = report(
        "2 (gradient oracles)",
        tab.passed && mlp.passed && within_time,
        &detail,
    );
    assert!(ok, "{detail}");
}

/// Backward induction over explicit depth sweeps; independent of the
/// value-iteration implementation it checks.
fn backward_induction_oracle(mdp: &TabularMDP, epsilon: f64) -> Vec<Vec<f64>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; ns];
    let mut q = vec![vec![0.0; na]; ns];
    for _ in 0..ns + 1 {
        let mut q_next = vec![vec![0.0; na]; ns];
        for s in 0..ns {
            if mdp.is_terminal(s) {
                continue;
            }
            for a in 0..na {
                let mut acc = mdp.r(s, a);
                for t in 0..ns {
                    acc += mdp.p(s, a, t) * v[t];
                }
                q_next[s][a] = acc;
            }
        }
        q = q_next;
        for s in 0..ns {
            v[s] = if mdp.is_terminal(s) {
                0.0
            } else {
                soft_value(&q[s], epsilon).unwrap()
            };
        }
    }
    q
}

fn bellman_residual(mdp: &TabularMDP, q: &[Vec<f64>], epsilon: f64, gamma: f64) -> f64 {
    let mut v = vec![0.0; mdp.n_states()];
    for s in 0..mdp.n_states() {
        if !mdp.is_terminal(s) {
            v[s] = soft_value(&q[s], epsilon).unwrap();
        }
    }
    let mut residual: f64 = 0.0;
    for s in 0..mdp.n_states() {
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..mdp.n_actions() {
            let backup = mdp.r(s, a)
                + gamma
                    * mdp
                        .transition_row(s, a)
                        .iter()
                        .zip(&v)
                        .map(|(&p, &val)| p * val)
                        .sum::<f64>();
            residual = residual.max((backup - q[s][a]).abs());
        }
    }
    residual
}

fn random_positive_policy(mdp: &TabularMDP, salt: u64) -> Vec<PolicyDist> {
    (0..mdp.n_states())
        .map(|s| {
            let raw: Vec<f64> = (0..mdp.n_actions())
                .map(|a| {
                    let x = ((s as u64 + 1) * 2654435761 ^ (a as u64 + 1) * 40503 ^ salt) % 997;
                    0.05 + x as f64 / 997.0
                })
                .collect();
            let sum: f64 = raw.iter().sum();
            PolicyDist::new(raw.into_iter().map(|x| x / sum).collect()).unwrap()
        })
        .collect()
}

#[test]
fn criterion_3_oracle_equivalence() {
    // Value iteration residuals, independently recomputed from the outputs.
    let mut max_residual: f64 = 0.0;
    let grid = fixture("grid5").unwrap().mdp;
    let vi = soft_value_iteration(&grid, 0.03, 0.99, 1e-9, 1_000_000).unwrap();
    max_residual = max_residual.max(bellman_residual(&grid, &vi.q, 0.03, 0.99));
    let mut max_bi_err: f64 = 0.0;
    let mut max_eval_err: f64 = 0.0;
    for seed in [5, 17, 23] {
        for layers in 1..=3usize {
            let mdp = build_layered_mdp(layers, 2, 2, seed).unwrap();
            let vi = soft_value_iteration(&mdp, 0.2, 1.0, 1e-9, 10_000).unwrap();
            max_residual = max_residual.max(bellman_residual(&mdp, &vi.q, 0.2, 1.0));
            let oracle = backward_induction_oracle(&mdp, 0.2);
            for s in 0..mdp.n_states() {
                for a in 0..mdp.n_actions() {
                    max_bi_err = max_bi_err.max((vi.q[s][a] - oracle[s][a]).abs());
                }
            }
            // Exact policy evaluation vs exhaustive trajectory enumeration.
            let policy = random_positive_policy(&mdp, seed ^ layers as u64);
            let eps = 0.25;
            let rep = exact_soft_policy_eval(&mdp, &policy, eps, 1.0).unwrap();
            let eta_enum = enumerate_expected_sum(&mdp, &policy, &|s, a| {
                mdp.r(s, a) + eps * policy[s].entropy()
            });
            let ret_enum = enumerate_expected_sum(&mdp, &policy, &|s, a| mdp.r(s, a));
            max_eval_err = max_eval_err.max((rep.eta - eta_enum).abs());
            max_eval_err = max_eval_err.max((rep.return_only - ret_enum).abs());
        }
    }
    let passed = max_residual <= 1e-9 && max_bi_err <= 1e-10 && max_eval_err <= 1e-10;
    let detail = format!(
        "VI residual {max_residual:.2e} (tol 1e-9), backward-induction err {max_bi_err:.2e} (tol 1e-10), eval-vs-enumeration err {max_eval_err:.2e} (tol 1e-10)"
    );
    let ok = report("3 (oracle equivalence)", passed, &detail);
    assert!(ok, "{detail}");
}

// ---------------------------------------------------------------------------
// Criteria 4, 5, 6, 8 share one batch of desk-scale runs.
// ---------------------------------------------------------------------------

const RUN_EPSILON: f64 = 0.03;
const RUN_STEPS: usize = 60_000;
const RUN_PRETRAIN: usize = 12_000;
const DEMO_STEPS: usize = 5_000;
const N_SEEDS: u64 = 10;

fn run_config(alg: Algorithm, seed: u64, demo: Option<std::path::PathBuf>) -> TrainConfig {
    let mut c = TrainConfig::defaults(alg);
    c.env = "grid5".into();
    c.epsilon = RUN_EPSILON;
    c.max_timesteps = RUN_STEPS;
    c.pretrain_steps = RUN_PRETRAIN;
    c.replay_start_size = 1_000;
    c.target_update_frequency = 500;
    c.initial_learning_rate = 0.02;
    c.final_learning_rate = 0.002;
    c.lr_decay_end_step = RUN_STEPS;
    c.eval_every = 500;
    c.eval_episodes = 20;
    c.seed = seed;
    c.demo_path = demo;
    c
}

fn eval_points(m: &[MetricsRow]) -> Vec<(usize, f64)> {
    m.iter()
        .filter_map(|r| r.eval_return_mean.map(|v| (r.step, v)))
        .collect()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Exact reward-only return of the noised soft-optimal expert.
fn expert_return(mdp: &TabularMDP, q_star: &[Vec<f64>], noise: f64) -> f64 {
    let mixed: Vec<PolicyDist> = (0..mdp.n_states())
        .map(|s| {
            let base = if mdp.is_terminal(s) {
                PolicyDist::uniform(mdp.n_actions())
            } else {
                softmax_policy(&q_star[s], RUN_EPSILON).unwrap()
            };
            let u = 1.0 / mdp.n_actions() as f64;
            PolicyDist::new(
                base.probs()
                    .iter()
                    .map(|&p| (1.0 - noise) * p + noise * u)
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    exact_soft_policy_eval(mdp, &mixed, RUN_EPSILON, 1.0)
        .unwrap()
        .return_only
}

#[test]
fn criteria_4_5_6_8_pretraining_behavior() {
    let t0 = Instant::now();
    let fix = fixture("grid5").unwrap();
    let vi = soft_value_iteration(&fix.mdp, RUN_EPSILON, 0.99, 1e-10, 1_000_000).unwrap();
    let star: Vec<PolicyDist> = (0..fix.mdp.n_states())
        .map(|s| {
            if fix.mdp.is_terminal(s) {
                PolicyDist::uniform(fix.mdp.n_actions())
            } else {
                softmax_policy(&vi.q[s], RUN_EPSILON).unwrap()
            }
        })
        .collect();
    let r_star = exact_soft_policy_eval(&fix.mdp, &star, RUN_EPSILON, 1.0)
        .unwrap()
        .return_only;
    assert!(
        r_star > 0.0,
        "fixture must have a positive soft-optimal return"
    );

    // Tune the expert's uniform-noise rate so its exact return sits at 70%
    // of the soft-optimal return, then generate the shared demo file.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if expert_return(&fix.mdp, &vi.q, mid) > 0.7 * r_star {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let noise = 0.5 * (lo + hi);
    let demos = generate_demos(
        &fix.mdp,
        &vi.q,
        RUN_EPSILON,
        noise,
        DEMO_STEPS,
        fix.max_episode_steps,
        999,
    )
    .unwrap();
    let demo_mean = demos.meta.mean_return_for_reporting();
    let dir = tempfile::tempdir().unwrap();
    let demo_path = dir.path().join("demo.jsonl");
    demo_save(&demos, &demo_path).unwrap();
    println!(
        "fixture: soft-optimal return {r_star:.4}, demo noise {noise:.4}, demo return {demo_mean:.4}"
    );

    let threshold = 0.9 * r_star;
    let mut steps_ours = Vec::new();
    let mut steps_soft = Vec::new();
    let mut exceed_count = 0;
    let mut drops_ours = Vec::new();
    let mut drops_bc = Vec::new();
    let mut gate_early_runs = 0;
    let mut branch_audit_ok = true;

    for seed in 0..N_SEEDS {
        let r_ours = train(&run_config(Algorithm::Ours, seed, Some(demo_path.clone()))).unwrap();
        let r_soft = train(&run_config(Algorithm::SoftQ, seed, None)).unwrap();
        let r_bc = train(&run_config(Algorithm::Bc, seed, Some(demo_path.clone()))).unwrap();

        // Criterion 4: first step whose evaluation reaches 90% of optimal.
        let first_hit = |m: &[MetricsRow]| {
            eval_points(m)
                .iter()
                .find(|(_, v)| *v >= threshold)
                .map(|(s, _)| *s)
                .unwrap_or(RUN_STEPS + 1) as f64
        };
        steps_ours.push(first_hit(&r_ours.metrics));
        steps_soft.push(first_hit(&r_soft.metrics));

        // Criterion 5: final-quarter mean evaluation return of `ours`.
        let fq: Vec<f64> = eval_points(&r_ours.metrics)
            .iter()
            .filter(|(s, _)| *s > RUN_STEPS * 3 / 4)
            .map(|(_, v)| *v)
            .collect();
        let fq_mean = fq.iter().sum::<f64>() / fq.len() as f64;
        if fq_mean > demo_mean {
            exceed_count += 1;
        }

        // Criterion 6: drop across the pretrain -> online transition.
        for (metrics, drops) in [
            (&r_ours.metrics, &mut drops_ours),
            (&r_bc.metrics, &mut drops_bc),
        ] {
            let ev = eval_points(metrics);
            let before: Vec<f64> = ev
                .iter()
                .filter(|(s, _)| *s > RUN_PRETRAIN - 2_000 && *s <= RUN_PRETRAIN)
                .map(|(_, v)| *v)
                .collect();
            let after_min = ev
                .iter()
                .filter(|(s, _)| *s > RUN_PRETRAIN && *s <= RUN_PRETRAIN + 4_000)
                .map(|(_, v)| *v)
                .fold(f64::INFINITY, f64::min);
            assert!(!before.is_empty() && after_min.is_finite());
            drops.push(before.iter().sum::<f64>() / before.len() as f64 - after_min);
        }

        // Criterion 8: the gate opens somewhere in the first half of
        // pretraining, and l_q is only ever positive on gate-active rows.
        let half = 1_000 + (RUN_PRETRAIN - 1_000) / 2;
        if r_ours
            .metrics
            .iter()
            .filter(|m| m.step >= 1_000 && m.step <= half)
            .filter_map(|m| m.gate_active_frac)
            .any(|f| f > 0.0)
        {
            gate_early_runs += 1;
        }
        for m in &r_ours.metrics {
            if let (Some(l_q), Some(frac)) = (m.l_q, m.gate_active_frac) {
                if l_q > 0.0 && frac == 0.0 {
                    branch_audit_ok = false;
                }
            }
        }
    }
    let elapsed = t0.elapsed();

    let med_ours = median(&mut steps_ours);
    let med_soft = median(&mut steps_soft);
    let c4 = med_ours <= 0.6 * med_soft && elapsed.as_secs_f64() < 900.0;
    let c4_ok = report(
        "4 (pretraining speedup)",
        c4,
        &format!(
            "median steps to 90% of optimal: ours {med_ours} vs soft_q {med_soft} (ratio {:.3}, need <= 0.6); all runs in {elapsed:.2?}",
            med_ours / med_soft
        ),
    );

    let c5_ok = report(
        "5 (exceeds imperfect demos)",
        exceed_count >= 8,
        &format!(
            "final-quarter mean exceeds demo return ({demo_mean:.4}) in {exceed_count}/{N_SEEDS} seeds (need >= 8)"
        ),
    );

    let med_drop_ours = median(&mut drops_ours);
    let med_drop_bc = median(&mut drops_bc);
    let c6 = med_drop_ours <= med_drop_bc && med_drop_bc > 0.0;
    let c6_ok = report(
        "6 (smoother transition than BC)",
        c6,
        &format!(
            "median transition drop: ours {med_drop_ours:.4} vs bc {med_drop_bc:.4} (need ours <= bc and bc > 0)"
        ),
    );

    let c8 = gate_early_runs == N_SEEDS as usize && branch_audit_ok;
    let c8_ok = report(
        "8 (gate behavior)",
        c8,
        &format!(
            "gate active early in {gate_early_runs}/{N_SEEDS} runs; l_q > 0 only on gate-active rows: {branch_audit_ok}"
        ),
    );

    assert!(c4_ok && c5_ok && c6_ok && c8_ok);
}

#[test]
fn criterion_7_reduction_correctness() {
    // ours with no pretraining is bit-for-bit plain soft Q-learning.
    let mut base = TrainConfig::defaults(Algorithm::Ours);
    base.env = "grid5".into();
    base.epsilon = RUN_EPSILON;
    base.max_timesteps = 5_000;
    base.pretrain_steps = 0;
    base.replay_start_size = 500;
    base.target_update_frequency = 250;
    base.eval_every = 1_000;
    base.eval_episodes = 5;
    base.initial_learning_rate = 0.02;
    base.final_learning_rate = 0.002;
    base.lr_decay_end_step = 5_000;
    base.seed = 3;
    let mut soft = base.clone();
    soft.algorithm = Algorithm::SoftQ;
    let a = train(&base).unwrap();
    let b = train(&soft).unwrap();
    let metrics_match = a.metrics == b.metrics;
    let params_match = a
        .model
        .params()
        .iter()
        .zip(b.model.params())
        .all(|(x, y)| x.to_bits() == y.to_bits());

    // lambda = 0 pretraining gradient is bit-for-bit the soft-Q gradient.
    let mdp = fixture("grid5").unwrap().mdp;
    let mut model = QModel::tabular(mdp.n_states(), mdp.n_actions());
    let params: Vec<f64> = (0..model.n_params())
        .map(|i| (i as f64 * 0.31).sin())
        .collect();
    model.set_params(&params).unwrap();
    let target = model.clone();
    let replay: Vec<softq::env::Transition> = (0..16)
        .map(|i| softq::env::Transition {
            state: i % mdp.n_states(),
            action: i % mdp.n_actions(),
            reward: mdp.r(i % mdp.n_states(), i % mdp.n_actions()),
            next_state: (i + 3) % mdp.n_states(),
            done: (i + 3) % mdp.n_states() == mdp.n_states() - 1,
        })
        .collect();
    let demo: Vec<softq::data::DemoSample> = (0..8)
        .map(|i| softq::data::DemoSample {
            state: i % mdp.n_states(),
            action: (i + 1) % mdp.n_actions(),
        })
        .collect();
    let mut acc_pre = GradAccumulator::for_model(&model);
    pretrain_grad(
        &model,
        &target,
        &replay,
        &demo,
        RUN_EPSILON,
        0.99,
        0.0,
        &mut acc_pre,
    )
    .unwrap();
    let mut acc_soft = GradAccumulator::for_model(&model);
    soft_q_grad(&model, &target, &replay, RUN_EPSILON, 0.99, &mut acc_soft).unwrap();
    let grads_match = acc_pre
        .grad
        .iter()
        .zip(&acc_soft.grad)
        .all(|(x, y)| x.to_bits() == y.to_bits());

    let passed = metrics_match && params_match && grads_match;
    let detail = format!(
        "ours(N_p=0) == soft_q bitwise: metrics {metrics_match}, params {params_match}; lambda=0 gradient bitwise: {grads_match}"
    );
    let ok = report("7 (reduction correctness)", passed, &detail);
    assert!(ok, "{detail}");
}
