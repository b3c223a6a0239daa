//! Differentiable Q-function models: a (state x action) table and a
//! one-hidden-layer tanh network over one-hot state encodings, with explicit
//! adjoint back-propagation and a central finite-difference oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QModelKind {
    Tabular,
    Mlp,
}

impl std::fmt::Display for QModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QModelKind::Tabular => write!(f, "tabular"),
            QModelKind::Mlp => write!(f, "mlp"),
        }
    }
}

/// A parameterized Q function over `n_states` one-hot-encoded states.
///
/// Parameter layout: tabular models store the table row-major; MLP models
/// store [w1 (hidden x in, row-major), b1, w2 (actions x hidden), b2].
#[derive(Debug, Clone)]
pub struct QModel {
    kind: QModelKind,
    n_states: usize,
    n_actions: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Flat gradient vector aligned with a model's parameter vector.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    pub grad: Vec<f64>,
    pub samples: usize,
}

impl GradAccumulator {
    pub fn new(n_params: usize) -> Self {
        Self {
            grad: vec![0.0; n_params],
            samples: 0,
        }
    }

    pub fn for_model(model: &QModel) -> Self {
        Self::new(model.n_params())
    }

    pub fn zero(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
        self.samples = 0;
    }
}

impl QModel {
    /// Zero-initialized table; the implied softmax policy starts uniform.
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        Self {
            kind: QModelKind::Tabular,
            n_states,
            n_actions,
            hidden: 0,
            params: vec![0.0; n_states * n_actions],
        }
    }

    /// One hidden tanh layer of width `hidden`; weights uniform in
    /// [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero, deterministic per seed.
    pub fn mlp(n_states: usize, n_actions: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params =
            Vec::with_capacity(hidden * n_states + hidden + n_actions * hidden + n_actions);
        let lim1 = 1.0 / (n_states as f64).sqrt();
        for _ in 0..hidden * n_states {
            params.push(rng.gen_range(-lim1..lim1));
        }
        params.extend(std::iter::repeat(0.0).take(hidden));
        let lim2 = 1.0 / (hidden as f64).sqrt();
        for _ in 0..n_actions * hidden {
            params.push(rng.gen_range(-lim2..lim2));
        }
        params.extend(std::iter::repeat(0.0).take(n_actions));
        Self {
            kind: QModelKind::Mlp,
            n_states,
            n_actions,
            hidden,
            params,
        }
    }

    pub fn new(
        kind: QModelKind,
        n_states: usize,
        n_actions: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        match kind {
            QModelKind::Tabular => Self::tabular(n_states, n_actions),
            QModelKind::Mlp => Self::mlp(n_states, n_actions, hidden, seed),
        }
    }

    pub fn kind(&self) -> QModelKind {
        self.kind
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.n_states {
            return Err(Error::ShapeMismatch(format!(
                "state {state} out of range (model has {} states)",
                self.n_states
            )));
        }
        Ok(())
    }

    /// Q(state, .) for all actions.
    pub fn forward(&self, state: usize) -> Vec<f64> {
        debug_assert!(state < self.n_states);
        match self.kind {
            QModelKind::Tabular => {
                self.params[state * self.n_actions..(state + 1) * self.n_actions].to_vec()
            }
            QModelKind::Mlp => {
                let h = self.hidden_activations(state);
                let (w2, b2) = (self.w2(), self.b2());
                (0..self.n_actions)
                    .map(|a| {
                        b2[a]
                            + w2[a * self.hidden..(a + 1) * self.hidden]
                                .iter()
                                .zip(&h)
                                .map(|(w, hv)| w * hv)
                                .sum::<f64>()
                    })
                    .collect()
            }
        }
    }

    pub fn try_forward(&self, state: usize) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(self.forward(state))
    }

    fn hidden_activations(&self, state: usize) -> Vec<f64> {
        let (w1, b1) = (self.w1(), self.b1());
        // One-hot input: w1 * x picks column `state`.
        (0..self.hidden)
            .map(|j| (w1[j * self.n_states + state] + b1[j]).tanh())
            .collect()
    }

    fn w1(&self) -> &[f64] {
        &self.params[..self.hidden * self.n_states]
    }

    fn b1(&self) -> &[f64] {
        let o = self.hidden * self.n_states;
        &self.params[o..o + self.hidden]
    }

    fn w2(&self) -> &[f64] {
        let o = self.hidden * self.n_states + self.hidden;
        &self.params[o..o + self.n_actions * self.hidden]
    }

    fn b2(&self) -> &[f64] {
        let o = self.hidden * self.n_states + self.hidden + self.n_actions * self.hidden;
        &self.params[o..]
    }

    /// Accumulates sum_a adjoint[a] * dQ(state, a)/dtheta into `acc`.
    pub fn backward(&self, state: usize, adjoint: &[f64], acc: &mut GradAccumulator) -> Result<()> {
        self.check_state(state)?;
        if adjoint.len() != self.n_actions {
            return Err(Error::ShapeMismatch(format!(
                "adjoint has {} entries, model has {} actions",
                adjoint.len(),
                self.n_actions
            )));
        }
        if acc.grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch("accumulator/parameter length".into()));
        }
        match self.kind {
            QModelKind::Tabular => {
                for (a, &u) in adjoint.iter().enumerate() {
                    acc.grad[state * self.n_actions + a] += u;
                }
            }
            QModelKind::Mlp => {
                let h = self.hidden_activations(state);
                let w2 = self.w2();
                let o_w1 = 0;
                let o_b1 = self.hidden * self.n_states;
                let o_w2 = o_b1 + self.hidden;
                let o_b2 = o_w2 + self.n_actions * self.hidden;
                // Output layer.
                for (a, &u) in adjoint.iter().enumerate() {
                    acc.grad[o_b2 + a] += u;
                    for j in 0..self.hidden {
                        acc.grad[o_w2 + a * self.hidden + j] += u * h[j];
                    }
                }
                // Hidden layer through tanh'(z) = 1 - h^2.
                for j in 0..self.hidden {
                    let dh: f64 = adjoint
                        .iter()
                        .enumerate()
                        .map(|(a, &u)| u * w2[a * self.hidden + j])
                        .sum();
                    let dz = dh * (1.0 - h[j] * h[j]);
                    acc.grad[o_b1 + j] += dz;
                    acc.grad[o_w1 + j * self.n_states + state] += dz;
                }
            }
        }
        acc.samples += 1;
        Ok(())
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_vec(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has {} entries, model expects {}",
                p.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Copies another model's parameters (target-network sync).
    pub fn sync_from(&mut self, other: &QModel) -> Result<()> {
        if self.kind != other.kind || self.params.len() != other.params.len() {
            return Err(Error::ShapeMismatch(
                "models are not structurally identical".into(),
            ));
        }
        self.params.copy_from_slice(&other.params);
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let doc = CheckpointJson {
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            n_states: self.n_states,
            n_actions: self.n_actions,
            hidden: self.hidden,
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_string(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let doc: CheckpointJson = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                doc.version
            )));
        }
        let expected = match doc.kind {
            QModelKind::Tabular => doc.n_states * doc.n_actions,
            QModelKind::Mlp => {
                doc.hidden * doc.n_states + doc.hidden + doc.n_actions * doc.hidden + doc.n_actions
            }
        };
        if doc.params.len() != expected {
            return Err(Error::ShapeMismatch("checkpoint parameter count".into()));
        }
        Ok(Self {
            kind: doc.kind,
            n_states: doc.n_states,
            n_actions: doc.n_actions,
            hidden: doc.hidden,
            params: doc.params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    version: u32,
    kind: QModelKind,
    n_states: usize,
    n_actions: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Central finite differences (L(theta + h e_i) - L(theta - h e_i)) / 2h per
/// coordinate; restores the parameters afterwards. The oracle for every
/// analytic gradient in this crate.
pub fn finite_diff_grad<F>(model: &mut QModel, mut loss: F, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&QModel) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(
            "finite-difference step must be positive".into(),
        ));
    }
    let base = model.params_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        model.params_mut()[i] = base[i] + h;
        let lp = loss(model);
        model.params_mut()[i] = base[i] - h;
        let lm = loss(model);
        model.params_mut()[i] = base[i];
        if !lp.is_finite() || !lm.is_finite() {
            model.set_params(&base)?;
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        grad[i] = (lp - lm) / (2.0 * h);
    }
    model.set_params(&base)?;
    Ok(grad)
}

/// Worst per-coordinate relative error, with differences at or below the
/// absolute floor `atol` not counted at all. A check at tolerance `rtol`
/// therefore passes iff |a - b| <= max(atol, rtol * max(|a|, |b|)) holds
/// everywhere. The comparison used by all gradient checks.
pub fn max_rel_error(a: &[f64], b: &[f64], atol: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = (x - y).abs();
            if diff <= atol {
                0.0
            } else {
                diff / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}
