//! Cooperative Markov games with a shared reward.

use mam_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one joint step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Joint observation `[n * obs_dim]`, agent-major.
    pub obs: Vec<f64>,
    /// Reward shared by every agent.
    pub reward: f64,
    pub done: bool,
}

pub trait MarkovGame {
    fn n_agents(&self) -> usize;
    /// Features per agent, including the agent-ID one-hot.
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Largest achievable episode return.
    fn max_return(&self) -> f64;
    /// Starts a new episode and returns the joint observation.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, actions: &[usize]) -> Result<Transition>;
}

fn check_actions(actions: &[usize], n: usize, k: usize, game: &str) -> Result<()> {
    if actions.len() != n {
        return Err(Error::Contract(format!("{game}: {} actions for {n} agents", actions.len())));
    }
    if let Some((i, a)) = actions.iter().enumerate().find(|(_, &a)| a >= k) {
        return Err(Error::Contract(format!("{game}: agent {i} chose action {a}, only {k} exist")));
    }
    Ok(())
}

fn one_hot(out: &mut Vec<f64>, index: Option<usize>, size: usize) {
    out.extend((0..size).map(|j| if Some(j) == index { 1.0 } else { 0.0 }));
}

/// Every agent picks one of `k` actions; the team scores 1 whenever all
/// actions agree. Each agent sees its own previous action and its ID.
#[derive(Clone, Debug)]
pub struct ConsensusGame {
    n: usize,
    k: usize,
    horizon: usize,
    t: usize,
    last: Vec<Option<usize>>,
}

impl ConsensusGame {
    pub fn new(n_agents: usize, n_actions: usize, horizon: usize) -> Result<Self> {
        if n_agents == 0 || n_actions == 0 || horizon == 0 {
            return Err(Error::Config("consensus game sizes must be positive".into()));
        }
        Ok(Self { n: n_agents, k: n_actions, horizon, t: 0, last: vec![None; n_agents] })
    }

    fn observe(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.n * self.obs_dim());
        for (i, last) in self.last.iter().enumerate() {
            one_hot(&mut obs, *last, self.k);
            one_hot(&mut obs, Some(i), self.n);
        }
        obs
    }
}

impl MarkovGame for ConsensusGame {
    fn n_agents(&self) -> usize {
        self.n
    }

    fn obs_dim(&self) -> usize {
        self.k + self.n
    }

    fn n_actions(&self) -> usize {
        self.k
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn max_return(&self) -> f64 {
        self.horizon as f64
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.t = 0;
        self.last.fill(None);
        self.observe()
    }

    fn step(&mut self, actions: &[usize]) -> Result<Transition> {
        check_actions(actions, self.n, self.k, "consensus")?;
        if self.t >= self.horizon {
            return Err(Error::Contract("consensus: step after episode end".into()));
        }
        let reward = if actions.iter().all(|&a| a == actions[0]) { 1.0 } else { 0.0 };
        for (last, &a) in self.last.iter_mut().zip(actions) {
            *last = Some(a);
        }
        self.t += 1;
        Ok(Transition { obs: self.observe(), reward, done: self.t == self.horizon })
    }
}

pub const STAY: usize = 0;
pub const UP: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;
pub const RIGHT: usize = 4;
pub const LOAD: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForagingConfig {
    pub grid: usize,
    pub n_agents: usize,
    pub n_food: usize,
    pub max_level: usize,
    pub horizon: usize,
}

impl Default for ForagingConfig {
    fn default() -> Self {
        Self { grid: 5, n_agents: 2, n_food: 2, max_level: 2, horizon: 25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Food {
    pos: (usize, usize),
    level: usize,
    alive: bool,
}

/// Small level-based foraging grid. Food is collected when the agents that
/// choose `LOAD` next to it have a combined level at least its own; the
/// shared reward is the collected level over the total food level, so an
/// episode's return is at most 1.
#[derive(Clone, Debug)]
pub struct ForagingLite {
    cfg: ForagingConfig,
    agents: Vec<(usize, usize)>,
    levels: Vec<usize>,
    food: Vec<Food>,
    total_level: usize,
    t: usize,
}

impl ForagingLite {
    pub fn new(cfg: ForagingConfig) -> Result<Self> {
        let ForagingConfig { grid, n_agents, n_food, max_level, horizon } = cfg;
        if grid == 0 || n_agents == 0 || n_food == 0 || max_level == 0 || horizon == 0 {
            return Err(Error::Config("foraging sizes must be positive".into()));
        }
        if n_agents + n_food > grid * grid {
            return Err(Error::Config(format!(
                "{n_agents} agents and {n_food} food items do not fit on a {grid}x{grid} grid"
            )));
        }
        let mut env = Self { cfg, agents: Vec::new(), levels: Vec::new(), food: Vec::new(), total_level: 0, t: 0 };
        env.reset(0);
        Ok(env)
    }

    /// Places agents and food explicitly; for tests and scripted scenarios.
    pub fn with_layout(
        cfg: ForagingConfig,
        agents: Vec<((usize, usize), usize)>,
        food: Vec<((usize, usize), usize)>,
    ) -> Result<Self> {
        if agents.len() != cfg.n_agents || food.len() != cfg.n_food {
            return Err(Error::Config("layout does not match the configured counts".into()));
        }
        let total_level = food.iter().map(|f| f.1).sum();
        Ok(Self {
            cfg,
            agents: agents.iter().map(|a| a.0).collect(),
            levels: agents.iter().map(|a| a.1).collect(),
            food: food.iter().map(|&(pos, level)| Food { pos, level, alive: true }).collect(),
            total_level,
            t: 0,
        })
    }

    fn occupied(&self, pos: (usize, usize)) -> bool {
        self.agents.contains(&pos) || self.food.iter().any(|f| f.alive && f.pos == pos)
    }

    fn adjacent(a: (usize, usize), b: (usize, usize)) -> bool {
        a.0.abs_diff(b.0) + a.1.abs_diff(b.1) == 1
    }

    fn observe(&self) -> Vec<f64> {
        let g = self.cfg.grid as f64;
        let lvl = self.cfg.max_level as f64;
        let mut obs = Vec::with_capacity(self.cfg.n_agents * self.obs_dim());
        for (i, &(r, c)) in self.agents.iter().enumerate() {
            obs.extend([r as f64 / g, c as f64 / g, self.levels[i] as f64 / lvl]);
            for f in &self.food {
                let alive = if f.alive { 1.0 } else { 0.0 };
                obs.extend([
                    alive * (f.pos.0 as f64 - r as f64) / g,
                    alive * (f.pos.1 as f64 - c as f64) / g,
                    alive * f.level as f64 / lvl,
                    alive,
                ]);
            }
            for (j, &(r2, c2)) in self.agents.iter().enumerate() {
                if j != i {
                    obs.extend([(r2 as f64 - r as f64) / g, (c2 as f64 - c as f64) / g, self.levels[j] as f64 / lvl]);
                }
            }
            one_hot(&mut obs, Some(i), self.cfg.n_agents);
        }
        obs
    }

    pub fn food_remaining(&self) -> usize {
        self.food.iter().filter(|f| f.alive).count()
    }
}

impl MarkovGame for ForagingLite {
    fn n_agents(&self) -> usize {
        self.cfg.n_agents
    }

    fn obs_dim(&self) -> usize {
        3 + 4 * self.cfg.n_food + 3 * (self.cfg.n_agents - 1) + self.cfg.n_agents
    }

    fn n_actions(&self) -> usize {
        6
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn max_return(&self) -> f64 {
        1.0
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let cfg = self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells: Vec<(usize, usize)> = (0..cfg.grid * cfg.grid).map(|i| (i / cfg.grid, i % cfg.grid)).collect();
        cells.shuffle(&mut rng);
        self.agents = cells[..cfg.n_agents].to_vec();
        self.levels = (0..cfg.n_agents).map(|_| rng.gen_range(1..=cfg.max_level)).collect();
        let team: usize = self.levels.iter().sum();
        self.food = cells[cfg.n_agents..cfg.n_agents + cfg.n_food]
            .iter()
            .map(|&pos| Food { pos, level: rng.gen_range(1..=cfg.max_level.min(team)), alive: true })
            .collect();
        self.total_level = self.food.iter().map(|f| f.level).sum();
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, actions: &[usize]) -> Result<Transition> {
        check_actions(actions, self.cfg.n_agents, 6, "foraging")?;
        if self.t >= self.cfg.horizon || self.food_remaining() == 0 {
            return Err(Error::Contract("foraging: step after episode end".into()));
        }
        let g = self.cfg.grid;
        for (i, &a) in actions.iter().enumerate() {
            let (r, c) = self.agents[i];
            let target = match a {
                UP if r > 0 => (r - 1, c),
                DOWN if r + 1 < g => (r + 1, c),
                LEFT if c > 0 => (r, c - 1),
                RIGHT if c + 1 < g => (r, c + 1),
                _ => continue,
            };
            if !self.occupied(target) {
                self.agents[i] = target;
            }
        }
        let mut collected = 0;
        for f in self.food.iter_mut().filter(|f| f.alive) {
            let power: usize = (0..self.cfg.n_agents)
                .filter(|&i| actions[i] == LOAD && Self::adjacent(self.agents[i], f.pos))
                .map(|i| self.levels[i])
                .sum();
            if power > 0 && power >= f.level {
                f.alive = false;
                collected += f.level;
            }
        }
        self.t += 1;
        let done = self.t == self.cfg.horizon || self.food_remaining() == 0;
        Ok(Transition { obs: self.observe(), reward: collected as f64 / self.total_level as f64, done })
    }
}
