//! Exact evaluation of small fully observed games and the sequential
//! advantage decomposition.

use mam_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_AGENTS: usize = 3;
pub const MAX_ACTIONS: usize = 4;
pub const MAX_STATES: usize = 20;

/// Finite game where every agent observes the state. Joint actions are
/// flattened with agent 0 as the least significant digit.
#[derive(Clone, Debug)]
pub struct TabularGame {
    pub n_agents: usize,
    pub n_actions: usize,
    pub n_states: usize,
    pub gamma: f64,
    /// `[S][joint]`
    pub reward: Vec<Vec<f64>>,
    /// `[S][joint][S']`, rows sum to one.
    pub transition: Vec<Vec<Vec<f64>>>,
}

/// Independent per-agent action distributions `[agent][state][action]`.
#[derive(Clone, Debug)]
pub struct ProductPolicy {
    pub probs: Vec<Vec<Vec<f64>>>,
}

fn guard(n: usize, k: usize, s: usize) -> Result<()> {
    if n == 0 || k == 0 || s == 0 {
        return Err(Error::Contract("tabular game sizes must be positive".into()));
    }
    if n > MAX_AGENTS || k > MAX_ACTIONS || s > MAX_STATES {
        return Err(Error::Contract(format!(
            "tabular game with {n} agents, {k} actions, {s} states exceeds the exact-evaluation limit \
             ({MAX_AGENTS} agents, {MAX_ACTIONS} actions, {MAX_STATES} states)"
        )));
    }
    Ok(())
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

impl TabularGame {
    pub fn random(n_agents: usize, n_actions: usize, n_states: usize, gamma: f64, seed: u64) -> Result<Self> {
        guard(n_agents, n_actions, n_states)?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("tabular discount {gamma} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let joint = n_actions.pow(n_agents as u32);
        let reward = (0..n_states).map(|_| (0..joint).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let transition =
            (0..n_states).map(|_| (0..joint).map(|_| random_simplex(&mut rng, n_states)).collect()).collect();
        Ok(Self { n_agents, n_actions, n_states, gamma, reward, transition })
    }

    pub fn joint_actions(&self) -> usize {
        self.n_actions.pow(self.n_agents as u32)
    }

    /// Per-agent actions of a flattened joint action.
    pub fn decode(&self, mut joint: usize) -> Vec<usize> {
        (0..self.n_agents)
            .map(|_| {
                let a = joint % self.n_actions;
                joint /= self.n_actions;
                a
            })
            .collect()
    }

    fn joint_prob(&self, pi: &ProductPolicy, s: usize, joint: usize) -> f64 {
        self.decode(joint).iter().enumerate().map(|(i, &a)| pi.probs[i][s][a]).product()
    }

    /// State values from `(I - gamma P_pi) V = r_pi`.
    pub fn state_values(&self, pi: &ProductPolicy) -> Result<Vec<f64>> {
        let s_n = self.n_states;
        let mut m = vec![vec![0.0; s_n + 1]; s_n];
        for (s, row) in m.iter_mut().enumerate() {
            row[s] = 1.0;
            for j in 0..self.joint_actions() {
                let p = self.joint_prob(pi, s, j);
                row[s_n] += p * self.reward[s][j];
                for (s2, &t) in self.transition[s][j].iter().enumerate() {
                    row[s2] -= self.gamma * p * t;
                }
            }
        }
        solve(m)
    }

    /// `Q(s, a) = R(s, a) + gamma * sum_s' P(s' | s, a) V(s')`, `[S][joint]`.
    pub fn action_values(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| {
                (0..self.joint_actions())
                    .map(|j| {
                        let next: f64 = self.transition[s][j].iter().zip(v).map(|(p, v)| p * v).sum();
                        self.reward[s][j] + self.gamma * next
                    })
                    .collect()
            })
            .collect()
    }
}

impl ProductPolicy {
    pub fn random(game: &TabularGame, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = (0..game.n_agents)
            .map(|_| (0..game.n_states).map(|_| random_simplex(&mut rng, game.n_actions)).collect())
            .collect();
        Self { probs }
    }
}

/// Gaussian elimination with partial pivoting on an augmented `[S][S+1]` system.
fn solve(mut m: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let n = m.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).expect("non-empty range");
        if m[pivot][col].abs() < 1e-300 {
            return Err(Error::Domain("singular policy-evaluation system".into()));
        }
        m.swap(col, pivot);
        let (upper, lower) = m.split_at_mut(col + 1);
        let pivot_row = &upper[col];
        for row in lower {
            let f = row[col] / pivot_row[col];
            if f != 0.0 {
                for (x, &p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * p;
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|c| m[row][c] * x[c]).sum();
        x[row] = (m[row][n] - tail) / m[row][row];
    }
    Ok(x)
}

/// `Q^{S}(s, a)`: the action value averaged over the actions of the agents
/// outside `subset`, drawn from `pi`. Only the coordinates of `a` in
/// `subset` are read.
fn marginal_q(game: &TabularGame, pi: &ProductPolicy, q: &[Vec<f64>], s: usize, a: &[usize], subset: &[bool]) -> f64 {
    let mut total = 0.0;
    for (j, &qj) in q[s].iter().enumerate() {
        let b = game.decode(j);
        let mut w = 1.0;
        for i in 0..game.n_agents {
            if subset[i] {
                if b[i] != a[i] {
                    w = 0.0;
                    break;
                }
            } else {
                w *= pi.probs[i][s][b[i]];
            }
        }
        if w != 0.0 {
            total += w * qj;
        }
    }
    total
}

/// Largest `|A(s, a) - sum_m A^{i_m}(s, a^{i_{1:m-1}}, a^{i_m})|` over all
/// states and joint actions, where the joint advantage is `Q - V` with `V`
/// from the linear solve and each local advantage is a difference of
/// consecutive marginal action values along `order`.
pub fn advantage_decomposition_check(game: &TabularGame, pi: &ProductPolicy, order: &[usize]) -> Result<f64> {
    guard(game.n_agents, game.n_actions, game.n_states)?;
    let mut seen = vec![false; game.n_agents];
    if order.len() != game.n_agents
        || !order.iter().all(|&i| i < game.n_agents && !std::mem::replace(&mut seen[i], true))
    {
        return Err(Error::Contract(format!("{order:?} is not a permutation of {} agents", game.n_agents)));
    }
    let v = game.state_values(pi)?;
    let q = game.action_values(&v);
    let mut worst = 0.0f64;
    for s in 0..game.n_states {
        for j in 0..game.joint_actions() {
            let a = game.decode(j);
            let mut subset = vec![false; game.n_agents];
            let mut prev = marginal_q(game, pi, &q, s, &a, &subset);
            let mut sum = 0.0;
            for &agent in order {
                subset[agent] = true;
                let cur = marginal_q(game, pi, &q, s, &a, &subset);
                sum += cur - prev;
                prev = cur;
            }
            worst = worst.max((q[s][j] - v[s] - sum).abs());
        }
    }
    Ok(worst)
}

/// Every ordering of `0..n`, lexicographic.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = vec![];
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}
