//! Finite MDP representation, environment builders, and trajectory simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::soft::PolicyDist;

const ROW_SUM_TOL: f64 = 1e-12;
const MDP_FORMAT_VERSION: u32 = 1;

/// A finite MDP with expected rewards r(s,a), a transition tensor indexed
/// (s, a, s'), an initial state distribution and a terminal-state mask.
/// Immutable after construction; all invariants are checked in `from_parts`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>, // row-major [s][a][s']
    reward: Vec<f64>,     // [s][a]
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    version: u32,
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    terminal: Vec<bool>,
    name: String,
}

impl TabularMDP {
    pub fn from_parts(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
        name: String,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp(
                "need at least one state and one action".into(),
            ));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::ShapeMismatch(format!(
                "transition tensor has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch("reward table size".into()));
        }
        if initial_dist.len() != n_states || terminal.len() != n_states {
            return Err(Error::ShapeMismatch("initial_dist/terminal length".into()));
        }
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial_dist,
            terminal,
            name,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition_row(s, a);
                let mut sum = 0.0;
                for &p in row {
                    if !(p >= 0.0) {
                        return Err(Error::InvalidMdp(format!(
                            "negative transition probability at (s={s}, a={a})"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidMdp(format!(
                        "transition row (s={s}, a={a}) sums to {sum}, expected 1"
                    )));
                }
            }
        }
        let mut init_sum = 0.0;
        for (s, &p) in self.initial_dist.iter().enumerate() {
            if !(p >= 0.0) {
                return Err(Error::InvalidMdp(format!(
                    "negative initial probability at state {s}"
                )));
            }
            if self.terminal[s] && p > 0.0 {
                return Err(Error::InvalidMdp(format!(
                    "terminal state {s} has positive initial probability"
                )));
            }
            init_sum += p;
        }
        if (init_sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidMdp(format!(
                "initial_dist sums to {init_sum}, expected 1"
            )));
        }
        // Terminal states are absorbing with zero reward.
        for s in 0..self.n_states {
            if !self.terminal[s] {
                continue;
            }
            for a in 0..self.n_actions {
                if (self.p(s, a, s) - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidMdp(format!(
                        "terminal state {s} is not absorbing"
                    )));
                }
                if self.r(s, a) != 0.0 {
                    return Err(Error::InvalidMdp(format!(
                        "terminal state {s} has nonzero reward"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// P(s' | s, a)
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    /// Expected reward r(s, a).
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn non_terminal_states(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&s| !self.terminal[s]).collect()
    }

    /// True iff every stationary policy reaches a terminal state with
    /// probability 1. Computed as a fixpoint: repeatedly discard states in
    /// which every action leaks out of the candidate trap set.
    pub fn all_policies_terminate(&self) -> bool {
        let mut trap: Vec<bool> = self.terminal.iter().map(|&t| !t).collect();
        loop {
            let mut changed = false;
            for s in 0..self.n_states {
                if !trap[s] {
                    continue;
                }
                let can_stay = (0..self.n_actions).any(|a| {
                    let stay: f64 = (0..self.n_states)
                        .filter(|&t| trap[t])
                        .map(|t| self.p(s, a, t))
                        .sum();
                    stay >= 1.0 - ROW_SUM_TOL
                });
                if !can_stay {
                    trap[s] = false;
                    changed = true;
                }
            }
            if !changed {
                return !trap.iter().any(|&x| x);
            }
        }
    }

    pub fn to_json_string(&self) -> String {
        let doc = MdpJson {
            version: MDP_FORMAT_VERSION,
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition: self.transition.clone(),
            reward: self.reward.clone(),
            initial_dist: self.initial_dist.clone(),
            terminal: self.terminal.clone(),
            name: self.name.clone(),
        };
        serde_json::to_string(&doc).expect("MDP serialization cannot fail")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: MdpJson = serde_json::from_str(s)?;
        if doc.version != MDP_FORMAT_VERSION {
            return Err(Error::InvalidMdp(format!(
                "unsupported MDP format version {}",
                doc.version
            )));
        }
        Self::from_parts(
            doc.n_states,
            doc.n_actions,
            doc.transition,
            doc.reward,
            doc.initial_dist,
            doc.terminal,
            doc.name,
        )
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// FNV-1a over the canonical JSON serialization; ties demo files to the
    /// exact environment they were generated on.
    pub fn content_hash(&self) -> u64 {
        fnv1a64(self.to_json_string().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// One environment step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

/// A simulated episode (or episode prefix, when truncated by a step limit).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Raw (unregularized, undiscounted) return.
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// Grid world layout. States of the built MDP enumerate non-wall cells in
/// row-major order plus one absorbing terminal; stepping onto the goal pays
/// `goal_reward` and transitions straight to the terminal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<(usize, usize)>,
    pub goal: (usize, usize),
    pub step_reward: f64,
    pub goal_reward: f64,
    pub slip_prob: f64,
    pub max_episode_steps: usize,
}

const GRID_ACTIONS: usize = 4; // up, down, left, right

impl GridWorldSpec {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidSpec("grid must be non-empty".into()));
        }
        if self.goal.0 >= self.width || self.goal.1 >= self.height {
            return Err(Error::InvalidSpec("goal out of bounds".into()));
        }
        if self.walls.contains(&self.goal) {
            return Err(Error::InvalidSpec("goal cell is a wall".into()));
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(Error::InvalidSpec(format!(
                "slip_prob {} outside [0,1]",
                self.slip_prob
            )));
        }
        for &(x, y) in &self.walls {
            if x >= self.width || y >= self.height {
                return Err(Error::InvalidSpec(format!("wall ({x},{y}) out of bounds")));
            }
        }
        Ok(())
    }
}

pub fn build_gridworld(spec: &GridWorldSpec) -> Result<TabularMDP> {
    spec.validate()?;
    let is_wall = |x: usize, y: usize| spec.walls.contains(&(x, y));

    // Enumerate non-wall cells row-major; terminal is the last state.
    let mut cell_of_state = Vec::new();
    let mut state_of_cell = vec![usize::MAX; spec.width * spec.height];
    for y in 0..spec.height {
        for x in 0..spec.width {
            if !is_wall(x, y) {
                state_of_cell[y * spec.width + x] = cell_of_state.len();
                cell_of_state.push((x, y));
            }
        }
    }
    let n_cells = cell_of_state.len();
    let n_states = n_cells + 1;
    let term = n_cells;

    let step = |(x, y): (usize, usize), dir: usize| -> (usize, usize) {
        let (tx, ty) = match dir {
            0 => (x as isize, y as isize - 1),
            1 => (x as isize, y as isize + 1),
            2 => (x as isize - 1, y as isize),
            _ => (x as isize + 1, y as isize),
        };
        if tx < 0 || ty < 0 || tx >= spec.width as isize || ty >= spec.height as isize {
            return (x, y);
        }
        let (tx, ty) = (tx as usize, ty as usize);
        if is_wall(tx, ty) {
            (x, y)
        } else {
            (tx, ty)
        }
    };

    let mut transition = vec![0.0; n_states * GRID_ACTIONS * n_states];
    let mut reward = vec![0.0; n_states * GRID_ACTIONS];
    let at = |s: usize, a: usize, t: usize| (s * GRID_ACTIONS + a) * n_states + t;

    for (s, &cell) in cell_of_state.iter().enumerate() {
        for a in 0..GRID_ACTIONS {
            if cell == spec.goal {
                // Never entered (stepping onto the goal jumps to the terminal);
                // kept as a valid state that ends the episode rewardlessly.
                transition[at(s, a, term)] = 1.0;
                continue;
            }
            for exec in 0..GRID_ACTIONS {
                let mut p = spec.slip_prob / GRID_ACTIONS as f64;
                if exec == a {
                    p += 1.0 - spec.slip_prob;
                }
                if p == 0.0 {
                    continue;
                }
                let dest = step(cell, exec);
                if dest == spec.goal {
                    transition[at(s, a, term)] += p;
                    reward[s * GRID_ACTIONS + a] += p * spec.goal_reward;
                } else {
                    let d = state_of_cell[dest.1 * spec.width + dest.0];
                    transition[at(s, a, d)] += p;
                    reward[s * GRID_ACTIONS + a] += p * spec.step_reward;
                }
            }
        }
    }
    for a in 0..GRID_ACTIONS {
        transition[at(term, a, term)] = 1.0;
    }

    // Start anywhere except walls and the goal.
    let starts: Vec<usize> = (0..n_cells)
        .filter(|&s| cell_of_state[s] != spec.goal)
        .collect();
    if starts.is_empty() {
        return Err(Error::InvalidSpec("grid has no start cells".into()));
    }
    let mut initial_dist = vec![0.0; n_states];
    for &s in &starts {
        initial_dist[s] = 1.0 / starts.len() as f64;
    }

    // Reject grids where no start can reach the goal (BFS over moves).
    let mut reach = vec![false; n_cells];
    let goal_state = state_of_cell[spec.goal.1 * spec.width + spec.goal.0];
    reach[goal_state] = true;
    let mut queue = vec![goal_state];
    while let Some(s) = queue.pop() {
        let cell = cell_of_state[s];
        for dir in 0..GRID_ACTIONS {
            let nb = step(cell, dir);
            let ns = state_of_cell[nb.1 * spec.width + nb.0];
            if !reach[ns] {
                reach[ns] = true;
                queue.push(ns);
            }
        }
    }
    if !starts.iter().any(|&s| reach[s]) {
        return Err(Error::InvalidSpec(
            "goal is unreachable from every start cell".into(),
        ));
    }

    let mut terminal = vec![false; n_states];
    terminal[term] = true;
    let name = format!(
        "grid{}x{}_goal{}_{}_slip{}_step{}_goal_r{}",
        spec.width,
        spec.height,
        spec.goal.0,
        spec.goal.1,
        spec.slip_prob,
        spec.step_reward,
        spec.goal_reward
    );
    TabularMDP::from_parts(
        n_states,
        GRID_ACTIONS,
        transition,
        reward,
        initial_dist,
        terminal,
        name,
    )
}

/// A strictly layered MDP: layer k only transitions to layer k+1 and the
/// last layer transitions to the absorbing terminal, so every trajectory
/// ends in exactly `n_layers` steps and undiscounted sums are finite.
/// Rewards are uniform in [-1, 1]; deterministic given `seed`.
pub fn build_layered_mdp(
    n_layers: usize,
    states_per_layer: usize,
    n_actions: usize,
    seed: u64,
) -> Result<TabularMDP> {
    if n_layers == 0 || states_per_layer == 0 || n_actions == 0 {
        return Err(Error::InvalidSpec("layered MDP counts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_states = n_layers * states_per_layer + 1;
    let term = n_states - 1;
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions];
    let at = |s: usize, a: usize, t: usize| (s * n_actions + a) * n_states + t;

    for layer in 0..n_layers {
        for i in 0..states_per_layer {
            let s = layer * states_per_layer + i;
            for a in 0..n_actions {
                reward[s * n_actions + a] = rng.gen_range(-1.0..1.0);
                if layer + 1 == n_layers {
                    transition[at(s, a, term)] = 1.0;
                } else {
                    let base = (layer + 1) * states_per_layer;
                    let mut raw = Vec::with_capacity(states_per_layer);
                    let mut sum = 0.0;
                    for _ in 0..states_per_layer {
                        let u: f64 = rng.gen();
                        raw.push(u);
                        sum += u;
                    }
                    if sum < 1e-9 {
                        for u in raw.iter_mut() {
                            *u = 1.0;
                        }
                        sum = states_per_layer as f64;
                    }
                    for (j, u) in raw.iter().enumerate() {
                        transition[at(s, a, base + j)] = u / sum;
                    }
                }
            }
        }
    }
    for a in 0..n_actions {
        transition[at(term, a, term)] = 1.0;
    }
    let mut initial_dist = vec![0.0; n_states];
    for s in 0..states_per_layer {
        initial_dist[s] = 1.0 / states_per_layer as f64;
    }
    let mut terminal = vec![false; n_states];
    terminal[term] = true;
    let name = format!("layered{n_layers}x{states_per_layer}x{n_actions}_seed{seed}");
    TabularMDP::from_parts(
        n_states,
        n_actions,
        transition,
        reward,
        initial_dist,
        terminal,
        name,
    )
}

/// Samples an index from a probability vector by inverse CDF walk.
pub(crate) fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Simulates one episode: samples the start state, then actions from
/// `policy` and successors from the transition tensor, until a terminal
/// state or `max_steps`. Reproducible given `rng_seed`.
pub fn rollout<F>(
    mdp: &TabularMDP,
    policy: F,
    max_steps: usize,
    rng_seed: u64,
) -> Result<Trajectory>
where
    F: Fn(usize) -> PolicyDist,
{
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut transitions = Vec::new();
    if max_steps == 0 {
        return Ok(Trajectory {
            transitions,
            seed: rng_seed,
        });
    }
    let mut state = sample_categorical(&mut rng, mdp.initial_dist());
    while transitions.len() < max_steps && !mdp.is_terminal(state) {
        let dist = policy(state);
        let probs = dist.probs();
        if probs.len() != mdp.n_actions() {
            return Err(Error::ShapeMismatch(format!(
                "policy produced {} action probabilities, environment has {}",
                probs.len(),
                mdp.n_actions()
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "policy distribution at state {state} is not normalized (sum {sum})"
            )));
        }
        let action = sample_categorical(&mut rng, probs);
        let reward = mdp.r(state, action);
        let next_state = sample_categorical(&mut rng, mdp.transition_row(state, action));
        let done = mdp.is_terminal(next_state);
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
            done,
        });
        state = next_state;
    }
    Ok(Trajectory {
        transitions,
        seed: rng_seed,
    })
}

pub fn uniform_policy(mdp: &TabularMDP) -> Vec<PolicyDist> {
    (0..mdp.n_states())
        .map(|_| PolicyDist::uniform(mdp.n_actions()))
        .collect()
}

/// An environment plus the episode step limit its rollouts use.
#[derive(Debug, Clone)]
pub struct EnvFixture {
    pub mdp: TabularMDP,
    pub max_episode_steps: usize,
}

pub fn grid5_spec() -> GridWorldSpec {
    // A wall row with a single passage at x = 0 separates most start cells
    // from the goal, so undirected exploration rarely finishes an episode.
    // The fixture is balanced for temperatures around 0.03: the step cost
    // must outweigh the per-step entropy bonus cap (epsilon * ln 4, ~0.042
    // at 0.03), otherwise the soft-optimal policy prefers wandering forever,
    // yet paths must stay cheap enough that the soft-optimal return is
    // clearly positive under softmax dithering.
    GridWorldSpec {
        width: 5,
        height: 5,
        walls: vec![(1, 1), (2, 1), (3, 1), (4, 1)],
        goal: (4, 0),
        step_reward: -0.06,
        goal_reward: 1.0,
        slip_prob: 0.1,
        // Uniform-walk episodes on the maze average ~400 steps; the limit
        // keeps truncation under 1% even for undirected policies.
        max_episode_steps: 2000,
    }
}

pub fn grid1x2_spec() -> GridWorldSpec {
    GridWorldSpec {
        width: 2,
        height: 1,
        walls: vec![],
        goal: (1, 0),
        step_reward: 0.0,
        goal_reward: 1.0,
        slip_prob: 0.0,
        max_episode_steps: 20,
    }
}

/// Resolves a named environment. Known names: `grid5`, `grid1x2`, and
/// `layered:<layers>x<states>x<actions>:<seed>`.
pub fn fixture(name: &str) -> Result<EnvFixture> {
    match name {
        "grid5" => {
            let spec = grid5_spec();
            Ok(EnvFixture {
                max_episode_steps: spec.max_episode_steps,
                mdp: build_gridworld(&spec)?,
            })
        }
        "grid1x2" => {
            let spec = grid1x2_spec();
            Ok(EnvFixture {
                max_episode_steps: spec.max_episode_steps,
                mdp: build_gridworld(&spec)?,
            })
        }
        other => {
            if let Some(rest) = other.strip_prefix("layered:") {
                let mut parts = rest.split(':');
                let dims = parts.next().unwrap_or("");
                let seed: u64 = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::UnknownFixture(other.into()))?;
                let mut d = dims.split('x');
                let l: usize = d
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::UnknownFixture(other.into()))?;
                let sp: usize = d
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::UnknownFixture(other.into()))?;
                let a: usize = d
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::UnknownFixture(other.into()))?;
                Ok(EnvFixture {
                    mdp: build_layered_mdp(l, sp, a, seed)?,
                    max_episode_steps: l + 1,
                })
            } else {
                Err(Error::UnknownFixture(other.into()))
            }
        }
    }
}
