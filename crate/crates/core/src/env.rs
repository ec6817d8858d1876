//! Seedable toy MDPs and the noisy high-dimensional observation wrapper.
//!
//! * `gridworld`: an `n × n` grid, start in the top-left corner, goal in
//!   the bottom-right. Reward 1 on entering the goal (terminal), 0 otherwise.
//!   Moves into the border or a wall cell leave the agent in place. Episode
//!   return lies in `[0, 1]`.
//! * `pole_balance`: cart-pole dynamics with 2 (left/right) or 3 (plus
//!   no-op) push actions; reward 1 per surviving step, so the return lies in
//!   `[0, horizon]`.
//!
//! The wrapper appends `pad_dim` i.i.d. Gaussian features, redrawn every
//! step, and optionally rotates the whole vector by a fixed random
//! orthogonal matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rl::StepEnd;
use crate::rng::{self, StreamRng};

pub struct Transition {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub end: StepEnd,
}

pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<Transition>;
    fn is_done(&self) -> bool;
}

fn check_step(done: bool, action: usize, n_actions: usize) -> Result<()> {
    if done {
        return contract("step called on a finished episode; reset first");
    }
    if action >= n_actions {
        return contract(format!("action {action} out of range (0..{n_actions})"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GridWorld {
    pub size: usize,
    pub walls: Vec<(usize, usize)>,
    pub horizon: usize,
    pos: (usize, usize),
    steps: usize,
    done: bool,
}

impl GridWorld {
    pub const UP: usize = 0;
    pub const DOWN: usize = 1;
    pub const LEFT: usize = 2;
    pub const RIGHT: usize = 3;

    pub fn new(size: usize, walls: Vec<(usize, usize)>, horizon: usize) -> Self {
        GridWorld {
            size,
            walls,
            horizon,
            pos: (0, 0),
            steps: 0,
            done: true,
        }
    }

    pub fn start(&self) -> (usize, usize) {
        (0, 0)
    }

    pub fn goal(&self) -> (usize, usize) {
        (self.size - 1, self.size - 1)
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn is_wall(&self, cell: (usize, usize)) -> bool {
        self.walls.contains(&cell)
    }

    /// Deterministic successor cell of `cell` under `action`.
    pub fn next_cell(&self, cell: (usize, usize), action: usize) -> (usize, usize) {
        let (r, c) = cell;
        let n = self.size;
        let target = match action {
            Self::UP if r > 0 => (r - 1, c),
            Self::DOWN if r + 1 < n => (r + 1, c),
            Self::LEFT if c > 0 => (r, c - 1),
            Self::RIGHT if c + 1 < n => (r, c + 1),
            _ => cell,
        };
        if self.is_wall(target) {
            cell
        } else {
            target
        }
    }

    fn observe(&self) -> Vec<f64> {
        let mut o = vec![0.0; self.size * self.size];
        o[self.pos.0 * self.size + self.pos.1] = 1.0;
        o
    }
}

impl Environment for GridWorld {
    fn obs_dim(&self) -> usize {
        self.size * self.size
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.pos = self.start();
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        check_step(self.done, action, 4)?;
        self.pos = self.next_cell(self.pos, action);
        self.steps += 1;
        let (reward, end) = if self.pos == self.goal() {
            (1.0, StepEnd::Terminal)
        } else if self.steps >= self.horizon {
            (0.0, StepEnd::Truncated)
        } else {
            (0.0, StepEnd::Continue)
        };
        self.done = end.is_done();
        Ok(Transition {
            observation: self.observe(),
            reward,
            end,
        })
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

/// Cart-pole balancing with Euler integration (τ = 0.02 s).
#[derive(Clone, Debug)]
pub struct PoleBalance {
    pub actions: usize,
    pub horizon: usize,
    state: [f64; 4],
    steps: usize,
    done: bool,
}

impl PoleBalance {
    const GRAVITY: f64 = 9.8;
    const CART_MASS: f64 = 1.0;
    const POLE_MASS: f64 = 0.1;
    const HALF_LENGTH: f64 = 0.5;
    const FORCE: f64 = 10.0;
    const TAU: f64 = 0.02;
    const ANGLE_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
    const POSITION_LIMIT: f64 = 2.4;

    pub fn new(actions: usize, horizon: usize) -> Result<Self> {
        if !(2..=3).contains(&actions) {
            return contract(format!("pole balance supports 2 or 3 actions, got {actions}"));
        }
        Ok(PoleBalance {
            actions,
            horizon,
            state: [0.0; 4],
            steps: 0,
            done: true,
        })
    }

    fn force(&self, action: usize) -> f64 {
        match (self.actions, action) {
            (2, 0) => -Self::FORCE,
            (2, _) => Self::FORCE,
            (_, 0) => -Self::FORCE,
            (_, 1) => 0.0,
            _ => Self::FORCE,
        }
    }
}

impl Environment for PoleBalance {
    fn obs_dim(&self) -> usize {
        4
    }

    fn n_actions(&self) -> usize {
        self.actions
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 0x501e);
        for s in self.state.iter_mut() {
            *s = r.random_range(-0.05..0.05);
        }
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        check_step(self.done, action, self.actions)?;
        let [x, x_dot, th, th_dot] = self.state;
        let f = self.force(action);
        let total = Self::CART_MASS + Self::POLE_MASS;
        let pml = Self::POLE_MASS * Self::HALF_LENGTH;
        let (sin, cos) = th.sin_cos();
        let temp = (f + pml * th_dot * th_dot * sin) / total;
        let th_acc = (Self::GRAVITY * sin - cos * temp)
            / (Self::HALF_LENGTH * (4.0 / 3.0 - Self::POLE_MASS * cos * cos / total));
        let x_acc = temp - pml * th_acc * cos / total;
        self.state = [
            x + Self::TAU * x_dot,
            x_dot + Self::TAU * x_acc,
            th + Self::TAU * th_dot,
            th_dot + Self::TAU * th_acc,
        ];
        self.steps += 1;
        let fell = self.state[0].abs() > Self::POSITION_LIMIT || self.state[2].abs() > Self::ANGLE_LIMIT;
        let end = if fell {
            StepEnd::Terminal
        } else if self.steps >= self.horizon {
            StepEnd::Truncated
        } else {
            StepEnd::Continue
        };
        self.done = end.is_done();
        Ok(Transition {
            observation: self.state.to_vec(),
            reward: 1.0,
            end,
        })
    }

    fn is_done(&self) -> bool {
        self.done
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyObsConfig {
    /// Number of appended pure-noise features.
    pub pad_dim: usize,
    /// Standard deviation of the noise features.
    pub scale: f64,
    /// Rotate the full observation by a fixed random orthogonal matrix.
    pub mixing: bool,
    pub mixing_seed: u64,
}

impl Default for NoisyObsConfig {
    fn default() -> Self {
        NoisyObsConfig {
            pad_dim: 103,
            scale: 1.0,
            mixing: false,
            mixing_seed: 0,
        }
    }
}

/// Random orthogonal `n × n` matrix (Gram–Schmidt on Gaussian columns),
/// row-major.
pub fn random_orthogonal(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 0x0a7);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    // rows of q are orthonormal; use them as matrix rows
    q.into_iter().flatten().collect()
}

pub struct NoisyObservation<E: Environment> {
    pub inner: E,
    pub config: NoisyObsConfig,
    mixing: Option<Vec<f64>>,
    rng: StreamRng,
}

impl<E: Environment> NoisyObservation<E> {
    pub fn new(inner: E, config: NoisyObsConfig) -> Self {
        let d = inner.obs_dim() + config.pad_dim;
        let mixing = config
            .mixing
            .then(|| random_orthogonal(d, config.mixing_seed));
        NoisyObservation {
            inner,
            config,
            mixing,
            rng: rng::stream(0, 0),
        }
    }

    pub fn mixing_matrix(&self) -> Option<&[f64]> {
        self.mixing.as_deref()
    }

    /// Recovers the base observation from a wrapped one.
    pub fn decode(&self, obs: &[f64]) -> Vec<f64> {
        let d_base = self.inner.obs_dim();
        match &self.mixing {
            None => obs[..d_base].to_vec(),
            Some(q) => {
                // x = Qᵀ y
                let d = obs.len();
                (0..d_base)
                    .map(|j| (0..d).map(|i| q[i * d + j] * obs[i]).sum())
                    .collect()
            }
        }
    }

    fn wrap(&mut self, base: Vec<f64>) -> Vec<f64> {
        let mut o = base;
        for _ in 0..self.config.pad_dim {
            o.push(self.config.scale * rng::normal(&mut self.rng));
        }
        match &self.mixing {
            None => o,
            Some(q) => {
                let d = o.len();
                (0..d)
                    .map(|i| q[i * d..(i + 1) * d].iter().zip(&o).map(|(a, b)| a * b).sum())
                    .collect()
            }
        }
    }
}

impl<E: Environment> Environment for NoisyObservation<E> {
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim() + self.config.pad_dim
    }

    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = rng::stream(seed, 0x0b5);
        let base = self.inner.reset(seed);
        self.wrap(base)
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        let t = self.inner.step(action)?;
        Ok(Transition {
            observation: self.wrap(t.observation),
            ..t
        })
    }

    fn is_done(&self) -> bool {
        self.inner.is_done()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseEnv {
    Gridworld {
        size: usize,
        #[serde(default)]
        walls: Vec<[usize; 2]>,
    },
    PoleBalance {
        actions: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub base: BaseEnv,
    pub horizon: usize,
    pub noise: NoisyObsConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            base: BaseEnv::Gridworld {
                size: 5,
                walls: vec![],
            },
            horizon: 50,
            noise: NoisyObsConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match &self.base {
            BaseEnv::Gridworld { size, walls } => {
                if *size < 2 {
                    return contract("gridworld size must be at least 2");
                }
                let walls = walls.iter().map(|w| (w[0], w[1])).collect();
                Box::new(NoisyObservation::new(
                    GridWorld::new(*size, walls, self.horizon),
                    self.noise.clone(),
                ))
            }
            BaseEnv::PoleBalance { actions } => Box::new(NoisyObservation::new(
                PoleBalance::new(*actions, self.horizon)?,
                self.noise.clone(),
            )),
        })
    }

    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if self.horizon == 0 {
            return Err(("env.horizon".into(), "must be at least 1".into()));
        }
        if !(self.noise.scale >= 0.0) {
            return Err(("env.noise.scale".into(), "must be non-negative".into()));
        }
        match &self.base {
            BaseEnv::Gridworld { size, walls } => {
                if *size < 2 {
                    return Err(("env.base.size".into(), "must be at least 2".into()));
                }
                let n = *size;
                if walls
                    .iter()
                    .any(|w| w[0] >= n || w[1] >= n || *w == [0, 0] || *w == [n - 1, n - 1])
                {
                    return Err((
                        "env.base.walls".into(),
                        "walls must lie inside the grid and avoid start and goal".into(),
                    ));
                }
            }
            BaseEnv::PoleBalance { actions } => {
                if !(2..=3).contains(actions) {
                    return Err(("env.base.actions".into(), "must be 2 or 3".into()));
                }
            }
        }
        Ok(())
    }
}

/// `k` independent environment copies with automatic reset. Copy `i` is
/// first reset with a seed derived from `(seed, i)`; later episodes draw
/// their reset seeds from the copy's own stream.
pub struct VecEnv {
    envs: Vec<Box<dyn Environment>>,
    seeds: Vec<StreamRng>,
    current: Vec<Vec<f64>>,
    running_return: Vec<f64>,
    completed: Vec<f64>,
}

pub struct VecStep {
    /// Successor observation of each copy before any reset.
    pub next_observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub ends: Vec<StepEnd>,
}

impl VecEnv {
    pub fn new(config: &EnvConfig, k: usize, seed: u64) -> Result<Self> {
        let mut envs = Vec::with_capacity(k);
        let mut seeds = Vec::with_capacity(k);
        let mut current = Vec::with_capacity(k);
        for i in 0..k {
            let mut env = config.build()?;
            let mut s = rng::stream(seed, 0xe0 + i as u64);
            current.push(env.reset(s.random()));
            envs.push(env);
            seeds.push(s);
        }
        Ok(VecEnv {
            envs,
            seeds,
            current,
            running_return: vec![0.0; k],
            completed: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.envs[0].obs_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.envs[0].n_actions()
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.current
    }

    /// Undiscounted returns of every episode finished so far, in order.
    pub fn completed_returns(&self) -> &[f64] {
        &self.completed
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<VecStep> {
        if actions.len() != self.envs.len() {
            return contract(format!(
                "expected {} actions, got {}",
                self.envs.len(),
                actions.len()
            ));
        }
        let mut out = VecStep {
            next_observations: Vec::with_capacity(actions.len()),
            rewards: Vec::with_capacity(actions.len()),
            ends: Vec::with_capacity(actions.len()),
        };
        for (i, &a) in actions.iter().enumerate() {
            let t = self.envs[i].step(a)?;
            self.running_return[i] += t.reward;
            if t.end.is_done() {
                self.completed.push(self.running_return[i]);
                self.running_return[i] = 0.0;
                let s = self.seeds[i].random();
                self.current[i] = self.envs[i].reset(s);
            } else {
                self.current[i] = t.observation.clone();
            }
            out.next_observations.push(t.observation);
            out.rewards.push(t.reward);
            out.ends.push(t.end);
        }
        Ok(out)
    }
}
