//! Replay buffer, reward-free demonstration datasets with JSON Lines I/O,
//! and imperfect-expert demonstration generation.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, TabularMDP, Transition};
use crate::error::{Error, Result};
use crate::soft::{softmax_policy, PolicyDist};

const DEMO_FORMAT_VERSION: u32 = 1;

/// Ring buffer of full transitions; once full, pushes evict the oldest entry.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer needs positive capacity");
        Self {
            capacity,
            storage: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Uniform sample with replacement, reproducible by seed.
    pub fn sample(&self, n: usize, rng_seed: u64) -> Result<Vec<Transition>> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.storage.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..n)
            .map(|_| self.storage[rng.gen_range(0..self.storage.len())])
            .collect())
    }

    /// Oldest-first iteration order (test hook for eviction semantics).
    pub fn iter_in_age_order(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.storage.split_at(self.cursor);
        older.iter().chain(newer.iter())
    }
}

/// One demonstration record: a state and the expert's action. No reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DemoSample {
    pub state: usize,
    pub action: usize,
}

/// A demonstration step with its position inside the source episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DemoStep {
    pub episode: usize,
    pub step: usize,
    pub state: usize,
    pub action: usize,
}

/// Descriptive metadata for a demonstration dataset. The measured mean return
/// is generation-time reporting data; it is deliberately not a public field so
/// training code cannot read it casually.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoMeta {
    pub env_name: String,
    pub env_hash: u64,
    pub generator: String,
    pub n_steps: usize,
    mean_return: f64,
}

impl DemoMeta {
    /// Generation-time mean episode return. For reporting and baselines only;
    /// never feed this into a training loss.
    pub fn mean_return_for_reporting(&self) -> f64 {
        self.mean_return
    }
}

/// Reward-free expert steps plus their metadata.
#[derive(Debug, Clone)]
pub struct DemoDataset {
    pub steps: Vec<DemoStep>,
    pub meta: DemoMeta,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Uniform (state, action) batch with replacement.
    pub fn sample_with<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<DemoSample>> {
        if self.steps.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..n)
            .map(|_| {
                let s = &self.steps[rng.gen_range(0..self.steps.len())];
                DemoSample {
                    state: s.state,
                    action: s.action,
                }
            })
            .collect())
    }

    pub fn verify_env(&self, mdp: &TabularMDP) -> Result<()> {
        let found = self.meta.env_hash;
        let expected = mdp.content_hash();
        if found != expected {
            return Err(Error::EnvHashMismatch { expected, found });
        }
        Ok(())
    }
}

/// Mixes a tempered soft-optimal policy with uniform noise:
/// (1 - noise_rate) * softmax(q_star / temperature) + noise_rate * uniform.
/// temperature = 0 means greedy argmax with uniform tie-breaking.
pub fn imperfect_expert_policy(
    q_star: &[Vec<f64>],
    temperature: f64,
    noise_rate: f64,
    n_actions: usize,
) -> Result<Vec<PolicyDist>> {
    if !(temperature >= 0.0) {
        return Err(Error::Config("temperature must be >= 0".into()));
    }
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::Config("noise_rate must be in [0, 1]".into()));
    }
    let u = 1.0 / n_actions as f64;
    q_star
        .iter()
        .map(|q| {
            if q.len() != n_actions {
                return Err(Error::ShapeMismatch("q_star row arity".into()));
            }
            let base: Vec<f64> = if temperature > 0.0 {
                softmax_policy(q, temperature)?.probs().to_vec()
            } else {
                let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ties = q.iter().filter(|&&v| v == m).count();
                q.iter()
                    .map(|&v| if v == m { 1.0 / ties as f64 } else { 0.0 })
                    .collect()
            };
            let probs = base
                .into_iter()
                .map(|p| (1.0 - noise_rate) * p + noise_rate * u)
                .collect();
            Ok(PolicyDist::from_normalized(probs))
        })
        .collect()
}

/// Rolls out the degraded expert and records (state, action) pairs only.
/// Episodes are truncated at `max_episode_steps`; the dataset is cut to
/// exactly `n_steps` records. Deterministic given `seed`.
pub fn generate_demos(
    mdp: &TabularMDP,
    q_star: &[Vec<f64>],
    temperature: f64,
    noise_rate: f64,
    n_steps: usize,
    max_episode_steps: usize,
    seed: u64,
) -> Result<DemoDataset> {
    if q_star.len() != mdp.n_states() {
        return Err(Error::ShapeMismatch(format!(
            "q_star has {} states, MDP has {}",
            q_star.len(),
            mdp.n_states()
        )));
    }
    if max_episode_steps == 0 {
        return Err(Error::Config("max_episode_steps must be >= 1".into()));
    }
    let behavior = imperfect_expert_policy(q_star, temperature, noise_rate, mdp.n_actions())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::with_capacity(n_steps);
    let mut returns = Vec::new();
    let mut episode = 0;
    while steps.len() < n_steps {
        let traj = rollout(mdp, |s| behavior[s].clone(), max_episode_steps, rng.gen())?;
        if traj.is_empty() {
            return Err(Error::Internal(
                "expert rollout produced no transitions".into(),
            ));
        }
        returns.push(traj.total_reward());
        for (t, tr) in traj.transitions.iter().enumerate() {
            if steps.len() == n_steps {
                break;
            }
            steps.push(DemoStep {
                episode,
                step: t,
                state: tr.state,
                action: tr.action,
            });
        }
        episode += 1;
    }
    let mean_return = if returns.is_empty() {
        0.0
    } else {
        returns.iter().sum::<f64>() / returns.len() as f64
    };
    Ok(DemoDataset {
        steps,
        meta: DemoMeta {
            env_name: mdp.name().to_string(),
            env_hash: mdp.content_hash(),
            generator: format!(
                "degraded-soft-optimal(temperature={temperature}, noise_rate={noise_rate}, seed={seed})"
            ),
            n_steps,
            mean_return,
        },
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoMetaJson {
    version: u32,
    env_name: String,
    env_hash: u64,
    generator: String,
    n_steps: usize,
    mean_return: f64,
}

// The step schema is closed: any extra key (a reward field in particular)
// is a violation, not an extension point.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoStepJson {
    ep: usize,
    t: usize,
    s: usize,
    a: usize,
}

/// JSON Lines: one meta record, then one `{"ep","t","s","a"}` record per step.
pub fn demo_save(ds: &DemoDataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let meta = DemoMetaJson {
        version: DEMO_FORMAT_VERSION,
        env_name: ds.meta.env_name.clone(),
        env_hash: ds.meta.env_hash,
        generator: ds.meta.generator.clone(),
        n_steps: ds.meta.n_steps,
        mean_return: ds.meta.mean_return,
    };
    writeln!(f, "{}", serde_json::to_string(&meta)?)?;
    for s in &ds.steps {
        let rec = DemoStepJson {
            ep: s.episode,
            t: s.step,
            s: s.state,
            a: s.action,
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
    }
    f.flush()?;
    Ok(())
}

/// Loads and validates a demo file. When `expected_env` is given, the stored
/// environment hash must match it.
pub fn demo_load(path: &Path, expected_env: Option<&TabularMDP>) -> Result<DemoDataset> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let meta_line = lines.next().ok_or_else(|| Error::DemoFormat {
        line: 1,
        msg: "missing meta record".into(),
    })??;
    let meta: DemoMetaJson = serde_json::from_str(&meta_line).map_err(|e| Error::DemoFormat {
        line: 1,
        msg: format!("bad meta record: {e}"),
    })?;
    if meta.version != DEMO_FORMAT_VERSION {
        return Err(Error::DemoFormat {
            line: 1,
            msg: format!("unsupported demo format version {}", meta.version),
        });
    }
    if let Some(mdp) = expected_env {
        let expected = mdp.content_hash();
        if meta.env_hash != expected {
            return Err(Error::EnvHashMismatch {
                expected,
                found: meta.env_hash,
            });
        }
    }
    let mut steps = Vec::with_capacity(meta.n_steps);
    let mut last: Option<(usize, usize)> = None;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DemoStepJson = serde_json::from_str(&line).map_err(|e| Error::DemoFormat {
            line: line_no,
            msg: format!("schema violation (records carry only ep/t/s/a): {e}"),
        })?;
        if let Some((ep, t)) = last {
            if rec.ep == ep && rec.t <= t {
                return Err(Error::DemoFormat {
                    line: line_no,
                    msg: format!(
                        "step index {} does not increase within episode {}",
                        rec.t, rec.ep
                    ),
                });
            }
        }
        if let Some(mdp) = expected_env {
            if rec.s >= mdp.n_states() || rec.a >= mdp.n_actions() {
                return Err(Error::DemoFormat {
                    line: line_no,
                    msg: format!(
                        "record (s={}, a={}) out of range for the environment ({} states, {} actions)",
                        rec.s,
                        rec.a,
                        mdp.n_states(),
                        mdp.n_actions()
                    ),
                });
            }
        }
        last = Some((rec.ep, rec.t));
        steps.push(DemoStep {
            episode: rec.ep,
            step: rec.t,
            state: rec.s,
            action: rec.a,
        });
    }
    if steps.len() != meta.n_steps {
        return Err(Error::DemoFormat {
            line: steps.len() + 1,
            msg: format!(
                "meta declares {} steps, file has {}",
                meta.n_steps,
                steps.len()
            ),
        });
    }
    Ok(DemoDataset {
        steps,
        meta: DemoMeta {
            env_name: meta.env_name,
            env_hash: meta.env_hash,
            generator: meta.generator,
            n_steps: meta.n_steps,
            mean_return: meta.mean_return,
        },
    })
}
