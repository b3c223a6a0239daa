//! Training gradients: the soft Q-learning semi-gradient, the decoupled
//! demonstration gradients (policy step with the critic frozen, Q step with
//! the policy frozen and gated by the performance constraint), their
//! combination for pretraining, and the BC / DQfD-margin baselines.
//!
//! Sign convention: every operation accumulates the *descent* gradient of the
//! scalar loss it reports, so `finite_diff_grad` of that scalar equals the
//! accumulated vector and the optimizer always steps `theta -= lr * grad`.
//!
//! Stop-gradients are realized by evaluating the frozen factor from a
//! separate parameter copy (`frozen`); the public single-model entry points
//! evaluate the frozen factor from the live model, which is exactly the
//! detached copy at the current parameters.

use crate::data::DemoSample;
use crate::env::Transition;
use crate::error::{Error, Result};
use crate::model::{GradAccumulator, QModel};
use crate::soft::{soft_value, softmax_policy, PolicyDist};

/// Scalar diagnostics of one gradient computation. Demo-related fields are
/// zero when the operation has no demonstration terms; `delta_v_mean` is only
/// populated by the verification suite's gradient-decomposition check.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossReport {
    pub soft_q_loss: f64,
    pub l_pi: f64,
    pub l_q: f64,
    pub alpha_hat: f64,
    pub gate_active: bool,
    pub entropy_mean: f64,
    pub y_mean: f64,
    pub delta_v_mean: f64,
}

/// TD target y = r + gamma * softvalue(q_next) (bootstrapping cut at episode
/// end). `q_next_target` comes from the target network.
pub fn td_target(
    r: f64,
    done: bool,
    q_next_target: &[f64],
    epsilon: f64,
    gamma: f64,
) -> Result<f64> {
    if done {
        return Ok(r);
    }
    Ok(r + gamma * soft_value(q_next_target, epsilon)?)
}

fn check_batch<T>(batch: &[T], what: &'static str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch(what));
    }
    Ok(())
}

/// Mean semi-gradient of the TD loss 1/2 (Q(s,a) - y)^2 with y treated as a
/// constant, accumulated at `scale`. Returns (loss, y_mean, entropy_mean).
fn soft_q_accumulate(
    model: &QModel,
    target_model: &QModel,
    batch: &[Transition],
    epsilon: f64,
    gamma: f64,
    acc: &mut GradAccumulator,
    scale: f64,
) -> Result<(f64, f64, f64)> {
    check_batch(batch, "replay")?;
    if model.n_params() != target_model.n_params() || model.kind() != target_model.kind() {
        return Err(Error::ShapeMismatch(
            "target model is not structurally identical".into(),
        ));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut y_sum = 0.0;
    let mut h_sum = 0.0;
    let mut adjoint = vec![0.0; model.n_actions()];
    for tr in batch {
        let q_row = model.try_forward(tr.state)?;
        let y = td_target(
            tr.reward,
            tr.done,
            &target_model.try_forward(tr.next_state)?,
            epsilon,
            gamma,
        )?;
        let delta = q_row[tr.action] - y;
        loss += 0.5 * delta * delta / n;
        y_sum += y / n;
        h_sum += softmax_policy(&q_row, epsilon)?.entropy() / n;
        if scale != 0.0 {
            adjoint.iter_mut().for_each(|v| *v = 0.0);
            adjoint[tr.action] = scale * delta / n;
            model.backward(tr.state, &adjoint, acc)?;
        }
    }
    Ok((loss, y_sum, h_sum))
}

/// Loss whose full gradient in the live parameters is the soft-Q
/// semi-gradient: the TD loss with targets from a fixed model.
pub fn soft_q_loss_value(
    model: &QModel,
    target_model: &QModel,
    batch: &[Transition],
    epsilon: f64,
    gamma: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for tr in batch {
        let q = model.try_forward(tr.state)?[tr.action];
        let y = td_target(
            tr.reward,
            tr.done,
            &target_model.try_forward(tr.next_state)?,
            epsilon,
            gamma,
        )?;
        loss += 0.5 * (q - y) * (q - y) / n;
    }
    Ok(loss)
}

/// Soft Q-learning update: accumulates the TD semi-gradient over a replay
/// batch, with bootstrap values from `target_model`.
pub fn soft_q_grad(
    model: &QModel,
    target_model: &QModel,
    batch: &[Transition],
    epsilon: f64,
    gamma: f64,
    acc: &mut GradAccumulator,
) -> Result<LossReport> {
    let (loss, y_mean, entropy_mean) =
        soft_q_accumulate(model, target_model, batch, epsilon, gamma, acc, 1.0)?;
    Ok(LossReport {
        soft_q_loss: loss,
        y_mean,
        entropy_mean,
        ..Default::default()
    })
}

/// d(entropy)/dq for the softmax policy at temperature epsilon:
/// dh/dq_j = -(pi_j/eps) * (log pi_j + h).
fn entropy_q_gradient(pi: &PolicyDist, log_pi: &[f64], epsilon: f64) -> Vec<f64> {
    let h = pi.entropy();
    pi.probs()
        .iter()
        .zip(log_pi)
        .map(|(&p, &lp)| -(p / epsilon) * (lp + h))
        .collect()
}

fn log_softmax(q: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let v = soft_value(q, epsilon)?;
    Ok(q.iter().map(|&x| (x - v) / epsilon).collect())
}

/// The decoupled policy loss
///   L_pi = mean_demo[ A(s*, a*) ] + eps * mean_replay[ h(s) ]
/// with every Q factor inside A taken from `frozen` and the policy live:
///   A(s*, a*) = Qf(s*, a*) - sum_a pi(a|s*) Qf(s*, a) - eps * h(s*).
pub fn l_pi_value(
    model: &QModel,
    frozen: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    epsilon: f64,
) -> Result<f64> {
    check_batch(demo, "demo")?;
    check_batch(replay, "replay")?;
    let mut demo_term = 0.0;
    for d in demo {
        let qf = frozen.try_forward(d.state)?;
        let pi = softmax_policy(&model.try_forward(d.state)?, epsilon)?;
        demo_term += (qf[d.action] - pi.expect(&qf) - epsilon * pi.entropy()) / demo.len() as f64;
    }
    let mut replay_term = 0.0;
    for tr in replay {
        let pi = softmax_policy(&model.try_forward(tr.state)?, epsilon)?;
        replay_term += epsilon * pi.entropy() / replay.len() as f64;
    }
    Ok(demo_term + replay_term)
}

/// Accumulates `scale` times the descent gradient of `l_pi_value` in the live
/// parameters (critic frozen), by exact enumeration over actions. Returns L_pi.
pub fn demo_policy_grad_frozen(
    model: &QModel,
    frozen: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    epsilon: f64,
    acc: &mut GradAccumulator,
    scale: f64,
) -> Result<f64> {
    let l_pi = l_pi_value(model, frozen, demo, replay, epsilon)?;
    if scale == 0.0 {
        return Ok(l_pi);
    }
    let n_demo = demo.len() as f64;
    for d in demo {
        let qf = frozen.try_forward(d.state)?;
        let q_live = model.try_forward(d.state)?;
        let pi = softmax_policy(&q_live, epsilon)?;
        let log_pi = log_softmax(&q_live, epsilon)?;
        let e_qf = pi.expect(&qf);
        let dh = entropy_q_gradient(&pi, &log_pi, epsilon);
        // d/dq_j [ -sum_a pi_a Qf_a - eps*h ]
        let adjoint: Vec<f64> = pi
            .probs()
            .iter()
            .zip(&qf)
            .zip(&dh)
            .map(|((&p, &qfa), &dhj)| {
                (-(p / epsilon) * (qfa - e_qf) - epsilon * dhj) * scale / n_demo
            })
            .collect();
        model.backward(d.state, &adjoint, acc)?;
    }
    let n_replay = replay.len() as f64;
    for tr in replay {
        let q_live = model.try_forward(tr.state)?;
        let pi = softmax_policy(&q_live, epsilon)?;
        let log_pi = log_softmax(&q_live, epsilon)?;
        let dh = entropy_q_gradient(&pi, &log_pi, epsilon);
        let adjoint: Vec<f64> = dh
            .iter()
            .map(|&dhj| epsilon * dhj * scale / n_replay)
            .collect();
        model.backward(tr.state, &adjoint, acc)?;
    }
    Ok(l_pi)
}

/// Policy update from demonstrations with the critic stopped at the current
/// parameters. Returns L_pi.
pub fn demo_policy_grad(
    model: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    epsilon: f64,
    acc: &mut GradAccumulator,
) -> Result<f64> {
    demo_policy_grad_frozen(model, model, demo, replay, epsilon, acc, 1.0)
}

/// Minibatch estimate of the "experts perform better" constraint:
///   alpha = mean_demo[ A(s*, a*) ] + eps * mean_replay[ h(s) ],
/// with the policy/entropy factors taken from `frozen` and Q live (both
/// coincide at the public entry point). Positive means the experts already
/// look better under the current Q.
pub fn alpha_hat_frozen(
    model: &QModel,
    frozen: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    epsilon: f64,
) -> Result<f64> {
    check_batch(demo, "demo")?;
    check_batch(replay, "replay")?;
    let mut demo_term = 0.0;
    for d in demo {
        let q_live = model.try_forward(d.state)?;
        let pi_f = softmax_policy(&frozen.try_forward(d.state)?, epsilon)?;
        demo_term += (q_live[d.action] - pi_f.expect(&q_live) - epsilon * pi_f.entropy())
            / demo.len() as f64;
    }
    let mut replay_term = 0.0;
    for tr in replay {
        let pi_f = softmax_policy(&frozen.try_forward(tr.state)?, epsilon)?;
        replay_term += epsilon * pi_f.entropy() / replay.len() as f64;
    }
    Ok(demo_term + replay_term)
}

pub fn alpha_hat(
    model: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    epsilon: f64,
) -> Result<f64> {
    alpha_hat_frozen(model, model, demo, replay, epsilon)
}

/// Hinged constraint loss L_Q = max(0, -alpha) with the policy factors from
/// `frozen` and Q live; the scalar the gated Q update descends.
pub fn l_q_value(
    model: &QModel,
    frozen: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    epsilon: f64,
) -> Result<f64> {
    Ok((-alpha_hat_frozen(model, frozen, demo, replay, epsilon)?).max(0.0))
}

/// Q update from demonstrations with the policy stopped: when the constraint
/// estimate is negative (experts look worse), accumulates `scale` times the
/// descent gradient of L_Q, which pushes Q(s*, a*) above the frozen policy's
/// mixture value. The hinge subgradient at exactly zero is zero. Returns
/// (l_q, alpha_hat, gate_active).
pub fn demo_q_grad_frozen(
    model: &QModel,
    frozen: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    epsilon: f64,
    acc: &mut GradAccumulator,
    scale: f64,
) -> Result<(f64, f64, bool)> {
    let alpha = alpha_hat_frozen(model, frozen, demo, replay, epsilon)?;
    if alpha >= 0.0 {
        return Ok((0.0, alpha, false));
    }
    if scale != 0.0 {
        let n = demo.len() as f64;
        for d in demo {
            let pi_f = softmax_policy(&frozen.try_forward(d.state)?, epsilon)?;
            // d(-A)/dq_j = pi_f_j - 1{j = a*}
            let mut adjoint: Vec<f64> = pi_f.probs().iter().map(|&p| p * scale / n).collect();
            adjoint[d.action] -= scale / n;
            model.backward(d.state, &adjoint, acc)?;
        }
    }
    Ok((-alpha, alpha, true))
}

/// Gated Q update from demonstrations (policy stopped at the current
/// parameters). Returns L_Q.
pub fn demo_q_grad(
    model: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    epsilon: f64,
    acc: &mut GradAccumulator,
) -> Result<f64> {
    Ok(demo_q_grad_frozen(model, model, demo, replay, epsilon, acc, 1.0)?.0)
}

/// Pretraining update: TD semi-gradient on the replay batch plus
/// lambda * (eps * policy step + gated Q step) from the demonstration batch.
/// With lambda = 0 the accumulator is bit-for-bit the plain soft-Q gradient.
pub fn pretrain_grad(
    model: &QModel,
    target_model: &QModel,
    replay: &[Transition],
    demo: &[DemoSample],
    epsilon: f64,
    gamma: f64,
    lambda: f64,
    acc: &mut GradAccumulator,
) -> Result<LossReport> {
    let (soft_q_loss, y_mean, entropy_mean) =
        soft_q_accumulate(model, target_model, replay, epsilon, gamma, acc, 1.0)?;
    let l_pi = demo_policy_grad_frozen(model, model, demo, replay, epsilon, acc, lambda * epsilon)?;
    let (l_q, alpha, gate_active) =
        demo_q_grad_frozen(model, model, demo, replay, epsilon, acc, lambda)?;
    Ok(LossReport {
        soft_q_loss,
        l_pi,
        l_q,
        alpha_hat: alpha,
        gate_active,
        entropy_mean,
        y_mean,
        delta_v_mean: 0.0,
    })
}

/// eps * mean cross-entropy of the expert actions under the softmax policy;
/// its full (undetached) gradient is what behavior cloning descends.
pub fn bc_loss_value(model: &QModel, demo: &[DemoSample], epsilon: f64) -> Result<f64> {
    check_batch(demo, "demo")?;
    let mut ce = 0.0;
    for d in demo {
        let log_pi = log_softmax(&model.try_forward(d.state)?, epsilon)?;
        ce -= log_pi[d.action] / demo.len() as f64;
    }
    Ok(epsilon * ce)
}

pub(crate) fn bc_grad_scaled(
    model: &QModel,
    demo: &[DemoSample],
    epsilon: f64,
    acc: &mut GradAccumulator,
    scale: f64,
) -> Result<f64> {
    check_batch(demo, "demo")?;
    let n = demo.len() as f64;
    let mut ce = 0.0;
    for d in demo {
        let q = model.try_forward(d.state)?;
        let pi = softmax_policy(&q, epsilon)?;
        let log_pi = log_softmax(&q, epsilon)?;
        ce -= log_pi[d.action] / n;
        if scale != 0.0 {
            // d/dq_j [ -eps * log pi(a*) ] = pi_j - 1{j = a*}
            let mut adjoint: Vec<f64> = pi.probs().iter().map(|&p| p * scale / n).collect();
            adjoint[d.action] -= scale / n;
            model.backward(d.state, &adjoint, acc)?;
        }
    }
    Ok(ce)
}

/// Behavior-cloning gradient: accumulates the descent gradient of
/// eps * mean cross-entropy (equivalently, minus the gradient ascending
/// eps * mean log pi(a*|s*)); per-sample tabular rows are pi - e_{a*}.
/// Returns the mean cross-entropy.
pub fn bc_grad(
    model: &QModel,
    demo: &[DemoSample],
    epsilon: f64,
    acc: &mut GradAccumulator,
) -> Result<f64> {
    bc_grad_scaled(model, demo, epsilon, acc, 1.0)
}

/// Full (no stop-gradient) gradient of mean_demo A(s*, a*), accumulated
/// termwise from the un-simplified per-action derivative. Used by the
/// BC-equivalence check; algebraically equals minus the BC gradient.
pub fn undetached_advantage_grad(
    model: &QModel,
    demo: &[DemoSample],
    epsilon: f64,
    acc: &mut GradAccumulator,
    scale: f64,
) -> Result<()> {
    check_batch(demo, "demo")?;
    let n = demo.len() as f64;
    for d in demo {
        let q = model.try_forward(d.state)?;
        let pi = softmax_policy(&q, epsilon)?;
        let log_pi = log_softmax(&q, epsilon)?;
        let e_q = pi.expect(&q);
        let dh = entropy_q_gradient(&pi, &log_pi, epsilon);
        let mut adjoint = vec![0.0; q.len()];
        for j in 0..q.len() {
            let p = pi.probs()[j];
            // d/dq_j [ q_{a*} - sum_a pi_a q_a - eps*h ], term by term
            let d_mix = p + (p / epsilon) * (q[j] - e_q);
            adjoint[j] = (-d_mix - epsilon * dh[j]) * scale / n;
        }
        adjoint[d.action] += scale / n;
        model.backward(d.state, &adjoint, acc)?;
    }
    Ok(())
}

/// Large-margin classification loss of DQfD's supervised term:
/// mean_demo[ max_a (Q(s*,a) + margin * 1{a != a*}) - Q(s*, a*) ].
pub fn dqfd_margin_loss_value(model: &QModel, demo: &[DemoSample], margin: f64) -> Result<f64> {
    check_batch(demo, "demo")?;
    let mut loss = 0.0;
    for d in demo {
        let q = model.try_forward(d.state)?;
        let (best, _) = margin_argmax(&q, d.action, margin);
        loss += (best - q[d.action]) / demo.len() as f64;
    }
    Ok(loss)
}

/// Ties resolve toward the expert action so a met margin yields zero loss
/// and zero gradient.
fn margin_argmax(q: &[f64], expert: usize, margin: f64) -> (f64, usize) {
    let mut best = q[expert];
    let mut best_a = expert;
    for (a, &v) in q.iter().enumerate() {
        if a == expert {
            continue;
        }
        if v + margin > best {
            best = v + margin;
            best_a = a;
        }
    }
    (best, best_a)
}

pub(crate) fn dqfd_update(
    model: &QModel,
    target_model: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    margin: f64,
    epsilon: f64,
    gamma: f64,
    acc: &mut GradAccumulator,
) -> Result<(f64, LossReport)> {
    if !(margin >= 0.0) {
        return Err(Error::Config(format!("margin must be >= 0, got {margin}")));
    }
    check_batch(demo, "demo")?;
    let (soft_q_loss, y_mean, entropy_mean) =
        soft_q_accumulate(model, target_model, replay, epsilon, gamma, acc, 1.0)?;
    let n = demo.len() as f64;
    let mut margin_loss = 0.0;
    for d in demo {
        let q = model.try_forward(d.state)?;
        let (best, best_a) = margin_argmax(&q, d.action, margin);
        margin_loss += (best - q[d.action]) / n;
        if best_a != d.action {
            let mut adjoint = vec![0.0; q.len()];
            adjoint[best_a] = 1.0 / n;
            adjoint[d.action] = -1.0 / n;
            model.backward(d.state, &adjoint, acc)?;
        }
    }
    let report = LossReport {
        soft_q_loss,
        l_q: margin_loss,
        y_mean,
        entropy_mean,
        ..Default::default()
    };
    Ok((margin_loss, report))
}

/// DQfD-style pretraining update: the large-margin supervised term on the
/// demonstration batch plus the standard soft-Q semi-gradient on the replay
/// batch. Returns the margin loss.
pub fn dqfd_margin_grad(
    model: &QModel,
    target_model: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    margin: f64,
    epsilon: f64,
    gamma: f64,
    acc: &mut GradAccumulator,
) -> Result<f64> {
    Ok(dqfd_update(
        model,
        target_model,
        demo,
        replay,
        margin,
        epsilon,
        gamma,
        acc,
    )?
    .0)
}

/// Loss matching `dqfd_margin_grad`'s accumulated gradient, for FD checks.
pub fn dqfd_loss_value(
    model: &QModel,
    target_model: &QModel,
    demo: &[DemoSample],
    replay: &[Transition],
    margin: f64,
    epsilon: f64,
    gamma: f64,
) -> Result<f64> {
    Ok(dqfd_margin_loss_value(model, demo, margin)?
        + soft_q_loss_value(model, target_model, replay, epsilon, gamma)?)
}
