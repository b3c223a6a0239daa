//! End-to-end training: warmup with a random policy, pretraining on
//! demonstrations plus replay, plain soft Q-learning afterwards, target
//! network, Adam with a linear learning-rate schedule, periodic evaluation,
//! and CSV metrics.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{demo_load, DemoDataset, ReplayBuffer};
use crate::env::{fixture, rollout, sample_categorical, TabularMDP, Transition};
use crate::error::{Error, Result};
use crate::losses::{bc_grad_scaled, dqfd_update, pretrain_grad, soft_q_grad, LossReport};
use crate::model::{GradAccumulator, QModel, QModelKind};
use crate::soft::softmax_policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Pretraining with decoupled demonstration gradients, then plain soft Q.
    Ours,
    /// Plain soft Q-learning; never touches demonstrations.
    SoftQ,
    /// Soft Q-learning plus a behavior-cloning term during pretraining.
    Bc,
    /// Soft Q-learning plus the DQfD large-margin term during pretraining.
    Dqfd,
}

impl Algorithm {
    pub fn uses_demos(self) -> bool {
        !matches!(self, Algorithm::SoftQ)
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Algorithm::Ours),
            "soft_q" => Ok(Algorithm::SoftQ),
            "bc" => Ok(Algorithm::Bc),
            "dqfd" => Ok(Algorithm::Dqfd),
            other => Err(Error::Config(format!(
                "unknown algorithm `{other}` (expected ours, soft_q, bc, dqfd)"
            ))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Algorithm::Ours => "ours",
            Algorithm::SoftQ => "soft_q",
            Algorithm::Bc => "bc",
            Algorithm::Dqfd => "dqfd",
        };
        write!(f, "{s}")
    }
}

/// Every hyperparameter of a run. `defaults()` carries the desk-scale
/// values; any field can be overridden through the config file or CLI flags.
#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub env: String,
    pub seed: u64,
    pub model: QModelKind,
    pub hidden_width: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub pretrain_steps: usize,
    pub max_timesteps: usize,
    pub minibatch_size: usize,
    pub replay_buffer_size: usize,
    pub replay_start_size: usize,
    pub learning_frequency: usize,
    pub target_update_frequency: usize,
    pub initial_learning_rate: f64,
    pub final_learning_rate: f64,
    pub lr_decay_end_step: usize,
    pub dqfd_margin: f64,
    pub demo_path: Option<PathBuf>,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn defaults(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            env: "grid5".into(),
            seed: 0,
            model: QModelKind::Tabular,
            hidden_width: 64,
            epsilon: 0.1,
            gamma: 0.99,
            lambda: 1.0,
            pretrain_steps: 20_000,
            max_timesteps: 200_000,
            minibatch_size: 32,
            replay_buffer_size: 50_000,
            replay_start_size: 1_000,
            learning_frequency: 4,
            target_update_frequency: 500,
            initial_learning_rate: 1e-4,
            final_learning_rate: 5e-5,
            lr_decay_end_step: 200_000,
            dqfd_margin: 0.8,
            demo_path: None,
            eval_every: 2_000,
            eval_episodes: 20,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain_steps > self.max_timesteps {
            return Err(Error::Config(
                "pretrain_steps must be <= max_timesteps".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must be in (0, 1]".into()));
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.replay_start_size {
            return Err(Error::Config(
                "minibatch_size must be in [1, replay_start_size]".into(),
            ));
        }
        if self.replay_buffer_size == 0 {
            return Err(Error::Config("replay_buffer_size must be positive".into()));
        }
        if self.learning_frequency == 0
            || self.target_update_frequency == 0
            || self.eval_every == 0
            || self.eval_episodes == 0
            || self.max_timesteps == 0
        {
            return Err(Error::Config(
                "frequencies, eval settings and max_timesteps must be >= 1".into(),
            ));
        }
        if !(self.initial_learning_rate > 0.0) || !(self.final_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.dqfd_margin >= 0.0) {
            return Err(Error::Config("dqfd_margin must be >= 0".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.model == QModelKind::Mlp && self.hidden_width == 0 {
            return Err(Error::Config(
                "hidden_width must be >= 1 for mlp models".into(),
            ));
        }
        if self.algorithm.uses_demos() && self.pretrain_steps > 0 && self.demo_path.is_none() {
            return Err(Error::Config(format!(
                "algorithm {} with pretrain_steps > 0 requires demo_path",
                self.algorithm
            )));
        }
        Ok(())
    }

    /// Learning rate at environment step `t`: affine from initial to final
    /// over [0, lr_decay_end_step], constant afterwards.
    pub fn learning_rate_at(&self, t: usize) -> f64 {
        if self.lr_decay_end_step == 0 || t >= self.lr_decay_end_step {
            if self.lr_decay_end_step == 0 {
                return self.initial_learning_rate;
            }
            return self.final_learning_rate;
        }
        let frac = t as f64 / self.lr_decay_end_step as f64;
        self.initial_learning_rate + (self.final_learning_rate - self.initial_learning_rate) * frac
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&ConfigFile::from(self)).expect("config serialization cannot fail")
    }
}

/// On-disk schema: every key optional, unknown keys rejected.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub algorithm: Option<Algorithm>,
    pub env: Option<String>,
    pub seed: Option<u64>,
    pub model: Option<QModelKind>,
    pub hidden_width: Option<usize>,
    pub epsilon: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub pretrain_steps: Option<usize>,
    pub max_timesteps: Option<usize>,
    pub minibatch_size: Option<usize>,
    pub replay_buffer_size: Option<usize>,
    pub replay_start_size: Option<usize>,
    pub learning_frequency: Option<usize>,
    pub target_update_frequency: Option<usize>,
    pub initial_learning_rate: Option<f64>,
    pub final_learning_rate: Option<f64>,
    pub lr_decay_end_step: Option<usize>,
    pub dqfd_margin: Option<f64>,
    pub demo_path: Option<PathBuf>,
    pub eval_every: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl From<&TrainConfig> for ConfigFile {
    fn from(c: &TrainConfig) -> Self {
        ConfigFile {
            algorithm: Some(c.algorithm),
            env: Some(c.env.clone()),
            seed: Some(c.seed),
            model: Some(c.model),
            hidden_width: Some(c.hidden_width),
            epsilon: Some(c.epsilon),
            gamma: Some(c.gamma),
            lambda: Some(c.lambda),
            pretrain_steps: Some(c.pretrain_steps),
            max_timesteps: Some(c.max_timesteps),
            minibatch_size: Some(c.minibatch_size),
            replay_buffer_size: Some(c.replay_buffer_size),
            replay_start_size: Some(c.replay_start_size),
            learning_frequency: Some(c.learning_frequency),
            target_update_frequency: Some(c.target_update_frequency),
            initial_learning_rate: Some(c.initial_learning_rate),
            final_learning_rate: Some(c.final_learning_rate),
            lr_decay_end_step: Some(c.lr_decay_end_step),
            dqfd_margin: Some(c.dqfd_margin),
            demo_path: c.demo_path.clone(),
            eval_every: Some(c.eval_every),
            eval_episodes: Some(c.eval_episodes),
            out_dir: c.out_dir.clone(),
        }
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies the file's values over `base`; the algorithm must come from
    /// somewhere (file, flag, or base).
    pub fn apply(&self, base: &mut TrainConfig) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { base.$field = v.clone(); })*
            };
        }
        take!(
            algorithm,
            env,
            seed,
            model,
            hidden_width,
            epsilon,
            gamma,
            lambda,
            pretrain_steps,
            max_timesteps,
            minibatch_size,
            replay_buffer_size,
            replay_start_size,
            learning_frequency,
            target_update_frequency,
            initial_learning_rate,
            final_learning_rate,
            lr_decay_end_step,
            dqfd_margin,
            eval_every,
            eval_episodes
        );
        if self.demo_path.is_some() {
            base.demo_path = self.demo_path.clone();
        }
        if self.out_dir.is_some() {
            base.out_dir = self.out_dir.clone();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Pretrain,
    Online,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Warmup => "warmup",
            Phase::Pretrain => "pretrain",
            Phase::Online => "online",
        };
        write!(f, "{s}")
    }
}

pub const METRICS_HEADER: &str = "step,episodes,phase,eval_return_mean,eval_return_std,soft_q_loss,l_pi,l_q,alpha_hat,gate_active_frac,entropy_mean,learning_rate";

/// One metrics row; evaluation fields are present only on evaluation points
/// and loss fields only when at least one update happened since the last row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub episodes: usize,
    pub phase: Phase,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub soft_q_loss: Option<f64>,
    pub l_pi: Option<f64>,
    pub l_q: Option<f64>,
    pub alpha_hat: Option<f64>,
    pub gate_active_frac: Option<f64>,
    pub entropy_mean: Option<f64>,
    pub learning_rate: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episodes,
            self.phase,
            opt(self.eval_return_mean),
            opt(self.eval_return_std),
            opt(self.soft_q_loss),
            opt(self.l_pi),
            opt(self.l_q),
            opt(self.alpha_hat),
            opt(self.gate_active_frac),
            opt(self.entropy_mean),
            self.learning_rate,
        )
    }
}

/// Plain Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One descent step along `grad` at learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 over the xor; decorrelates the per-concern streams.
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SALT_ENV: u64 = 1;
const SALT_REPLAY: u64 = 2;
const SALT_DEMO: u64 = 3;
const SALT_EVAL: u64 = 4;
const SALT_INIT: u64 = 5;

/// Rolls out the softmax policy of `model` and reports (mean, sample std) of
/// the raw, unregularized episode returns. Evaluation acts with the same
/// stochastic policy used for training rollouts.
pub fn evaluate(
    model: &QModel,
    mdp: &TabularMDP,
    n_episodes: usize,
    epsilon: f64,
    max_episode_steps: usize,
    rng_seed: u64,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let traj = rollout(
            mdp,
            |s| softmax_policy(&model.forward(s), epsilon).expect("finite Q values"),
            max_episode_steps,
            rng.next_u64(),
        )?;
        returns.push(traj.total_reward());
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = if returns.len() > 1 {
        (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

/// Everything a finished (or aborted) run leaves behind.
#[derive(Debug)]
pub struct TrainResult {
    pub model: QModel,
    pub target_model: QModel,
    pub metrics: Vec<MetricsRow>,
    /// Environment steps at which the target network was synced.
    pub sync_steps: Vec<usize>,
    /// Demo batches sampled at or after the pretrain boundary (must be 0).
    pub demo_reads_after_pretrain: usize,
    pub episodes: usize,
}

struct Aggregates {
    updates: usize,
    soft_q_loss: f64,
    entropy: f64,
    demo_updates: usize,
    l_pi: f64,
    l_q: f64,
    alpha: f64,
    gate_hits: usize,
}

impl Aggregates {
    fn new() -> Self {
        Self {
            updates: 0,
            soft_q_loss: 0.0,
            entropy: 0.0,
            demo_updates: 0,
            l_pi: 0.0,
            l_q: 0.0,
            alpha: 0.0,
            gate_hits: 0,
        }
    }

    fn add(&mut self, report: &LossReport, demo_terms: bool) {
        self.updates += 1;
        self.soft_q_loss += report.soft_q_loss;
        self.entropy += report.entropy_mean;
        if demo_terms {
            self.demo_updates += 1;
            self.l_pi += report.l_pi;
            self.l_q += report.l_q;
            self.alpha += report.alpha_hat;
            if report.gate_active {
                self.gate_hits += 1;
            }
        }
    }

    fn flush(
        &mut self,
    ) -> (
        Option<f64>,
        Option<f64>,
        Option<f64>,
        Option<f64>,
        Option<f64>,
        Option<f64>,
    ) {
        let out = if self.updates == 0 {
            (None, None, None, None, None, None)
        } else {
            let n = self.updates as f64;
            let demo = self.demo_updates as f64;
            (
                Some(self.soft_q_loss / n),
                Some(self.entropy / n),
                (self.demo_updates > 0).then(|| self.l_pi / demo),
                (self.demo_updates > 0).then(|| self.l_q / demo),
                (self.demo_updates > 0).then(|| self.alpha / demo),
                (self.demo_updates > 0).then(|| self.gate_hits as f64 / demo),
            )
        };
        *self = Self::new();
        out
    }
}

/// Runs the full training loop. Fully reproducible given the config seed.
pub fn train(config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    let fix = fixture(&config.env)?;
    let mdp = &fix.mdp;

    // Demos are loaded (and their environment hash checked) only when the
    // run will actually pretrain on them.
    let demos: Option<DemoDataset> = if config.algorithm.uses_demos() && config.pretrain_steps > 0 {
        let path = config.demo_path.as_ref().expect("validated");
        Some(demo_load(path, Some(mdp))?)
    } else {
        None
    };
    if let Some(d) = &demos {
        if d.is_empty() {
            return Err(Error::Config("demo dataset is empty".into()));
        }
    }

    let mut model = QModel::new(
        config.model,
        mdp.n_states(),
        mdp.n_actions(),
        config.hidden_width,
        mix_seed(config.seed, SALT_INIT),
    );
    let mut target = model.clone();
    let mut adam = Adam::new(model.n_params());
    let mut acc = GradAccumulator::for_model(&model);
    let mut replay = ReplayBuffer::new(config.replay_buffer_size);

    let mut env_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SALT_ENV));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SALT_REPLAY));
    let mut demo_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, SALT_DEMO));

    let mut state = sample_categorical(&mut env_rng, mdp.initial_dist());
    let mut episode_len = 0usize;
    let mut episodes = 0usize;
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut agg = Aggregates::new();
    let mut sync_steps = Vec::new();
    let mut demo_reads_after_pretrain = 0usize;
    let mut update_count = 0usize;

    let out_dir = config.out_dir.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), config.to_toml_string())?;
    }

    let phase_of = |t: usize| {
        if t < config.replay_start_size {
            Phase::Warmup
        } else if t < config.pretrain_steps {
            Phase::Pretrain
        } else {
            Phase::Online
        }
    };

    // On an aborted run only the metrics (with the diagnostic row) are
    // written; a checkpoint of non-finite parameters would be unloadable.
    let finish_files = |model: Option<&QModel>, metrics: &[MetricsRow]| -> Result<()> {
        if let Some(dir) = &out_dir {
            let mut text = String::with_capacity(metrics.len() * 96 + 128);
            text.push_str(METRICS_HEADER);
            text.push('\n');
            for row in metrics {
                text.push_str(&row.to_csv_line());
                text.push('\n');
            }
            std::fs::write(dir.join("metrics.csv"), text)?;
            if let Some(model) = model {
                model.save(&dir.join("checkpoint_final.json"))?;
            }
        }
        Ok(())
    };

    for t in 1..=config.max_timesteps {
        // Act: uniform-random during warmup, softmax(Q/epsilon) afterwards.
        let action = if t <= config.replay_start_size {
            env_rng.gen_range(0..mdp.n_actions())
        } else {
            let pi = softmax_policy(&model.forward(state), config.epsilon)?;
            sample_categorical(&mut env_rng, pi.probs())
        };
        let reward = mdp.r(state, action);
        let next_state = sample_categorical(&mut env_rng, mdp.transition_row(state, action));
        let done = mdp.is_terminal(next_state);
        replay.push(Transition {
            state,
            action,
            reward,
            next_state,
            done,
        });
        episode_len += 1;
        if done || episode_len >= fix.max_episode_steps {
            episodes += 1;
            state = sample_categorical(&mut env_rng, mdp.initial_dist());
            episode_len = 0;
        } else {
            state = next_state;
        }

        // Target sync: first at warmup end, then every target_update_frequency
        // steps, so learning never bootstraps from a stale initial copy.
        if t >= config.replay_start_size
            && (t - config.replay_start_size) % config.target_update_frequency == 0
        {
            target.sync_from(&model)?;
            sync_steps.push(t);
        }

        let mut did_update = false;
        if t >= config.replay_start_size && t % config.learning_frequency == 0 {
            let replay_batch = replay.sample_with(config.minibatch_size, &mut replay_rng)?;
            let pretraining = t < config.pretrain_steps;
            acc.zero();
            let (report, demo_terms) = match (config.algorithm, pretraining) {
                (Algorithm::Ours, true) => {
                    let demo_batch = demos
                        .as_ref()
                        .expect("validated")
                        .sample_with(config.minibatch_size, &mut demo_rng)?;
                    let rep = pretrain_grad(
                        &model,
                        &target,
                        &replay_batch,
                        &demo_batch,
                        config.epsilon,
                        config.gamma,
                        config.lambda,
                        &mut acc,
                    )?;
                    (rep, true)
                }
                (Algorithm::Bc, true) => {
                    let demo_batch = demos
                        .as_ref()
                        .expect("validated")
                        .sample_with(config.minibatch_size, &mut demo_rng)?;
                    let mut rep = soft_q_grad(
                        &model,
                        &target,
                        &replay_batch,
                        config.epsilon,
                        config.gamma,
                        &mut acc,
                    )?;
                    // Cross-entropy imitation at the scale the combined
                    // pretrain gradient gives its policy term.
                    let ce = bc_grad_scaled(
                        &model,
                        &demo_batch,
                        config.epsilon,
                        &mut acc,
                        config.lambda * config.epsilon,
                    )?;
                    rep.l_pi = ce;
                    (rep, true)
                }
                (Algorithm::Dqfd, true) => {
                    let demo_batch = demos
                        .as_ref()
                        .expect("validated")
                        .sample_with(config.minibatch_size, &mut demo_rng)?;
                    let (_, rep) = dqfd_update(
                        &model,
                        &target,
                        &demo_batch,
                        &replay_batch,
                        config.dqfd_margin,
                        config.epsilon,
                        config.gamma,
                        &mut acc,
                    )?;
                    (rep, true)
                }
                _ => {
                    let rep = soft_q_grad(
                        &model,
                        &target,
                        &replay_batch,
                        config.epsilon,
                        config.gamma,
                        &mut acc,
                    )?;
                    (rep, false)
                }
            };
            if demo_terms && t >= config.pretrain_steps {
                demo_reads_after_pretrain += 1;
            }
            if !report.soft_q_loss.is_finite() {
                metrics.push(MetricsRow {
                    step: t,
                    episodes,
                    phase: phase_of(t),
                    eval_return_mean: None,
                    eval_return_std: None,
                    soft_q_loss: Some(report.soft_q_loss),
                    l_pi: None,
                    l_q: None,
                    alpha_hat: None,
                    gate_active_frac: None,
                    entropy_mean: None,
                    learning_rate: config.learning_rate_at(t),
                });
                finish_files(None, &metrics)?;
                return Err(Error::NonFiniteLoss { step: t });
            }
            adam.step(model.params_mut(), &acc.grad, config.learning_rate_at(t));
            agg.add(&report, demo_terms);
            update_count += 1;
            did_update = true;
        }

        if t == config.pretrain_steps && t > 0 {
            if let Some(dir) = &out_dir {
                model.save(&dir.join("checkpoint_pretrain.json"))?;
            }
        }

        let eval_due = t % config.eval_every == 0;
        let loss_row_due = did_update && update_count % 100 == 0;
        if eval_due || loss_row_due {
            let eval = if eval_due {
                Some(evaluate(
                    &model,
                    mdp,
                    config.eval_episodes,
                    config.epsilon,
                    fix.max_episode_steps,
                    mix_seed(config.seed, SALT_EVAL ^ (t as u64).rotate_left(17)),
                )?)
            } else {
                None
            };
            let (soft_q_loss, entropy_mean, l_pi, l_q, alpha_hat, gate_frac) = agg.flush();
            metrics.push(MetricsRow {
                step: t,
                episodes,
                phase: phase_of(t),
                eval_return_mean: eval.map(|e| e.0),
                eval_return_std: eval.map(|e| e.1),
                soft_q_loss,
                l_pi,
                l_q,
                alpha_hat,
                gate_active_frac: gate_frac,
                entropy_mean,
                learning_rate: config.learning_rate_at(t),
            });
        }
    }

    finish_files(Some(&model), &metrics)?;
    Ok(TrainResult {
        model,
        target_model: target,
        metrics,
        sync_steps,
        demo_reads_after_pretrain,
        episodes,
    })
}
