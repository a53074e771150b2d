//! On-policy trajectory collection.

use mam_core::{Array, DecodeMode, Error, JointPolicy, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::MarkovGame;
use crate::gae::gae;
use crate::train::TrainConfig;

/// `T` consecutive joint steps, possibly spanning several episodes.
///
/// Per-agent arrays are step-major and listed in the order the policy saw
/// the agents, which differs from the environment's order only when agent
/// permutation is enabled.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub n_agents: usize,
    pub obs_dim: usize,
    /// `[T, n, obs_dim]`
    pub obs: Vec<f64>,
    /// `[T, n]`
    pub actions: Vec<usize>,
    /// `[T]`
    pub rewards: Vec<f64>,
    /// `[T, n]`
    pub values: Vec<f64>,
    /// `[T, n]` log-probabilities under the collecting policy.
    pub log_probs: Vec<f64>,
    /// `[T, n]`
    pub advantages: Vec<f64>,
    /// `[T, n]`, equal to `advantages + values`.
    pub returns: Vec<f64>,
    /// `[T]`
    pub dones: Vec<bool>,
    /// Returns of the episodes that ended inside the batch.
    pub episode_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn steps(&self) -> usize {
        self.rewards.len()
    }
}

fn permuted(obs: &[f64], order: &[usize], od: usize) -> Vec<f64> {
    order.iter().flat_map(|&i| obs[i * od..(i + 1) * od].iter().copied()).collect()
}

/// Runs `policy` in `env` for `length` steps, sampling each joint action
/// autoregressively, then fills advantages and returns by GAE.
pub fn collect_rollout(
    env: &mut dyn MarkovGame,
    policy: &dyn JointPolicy<f64>,
    length: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<RolloutBatch> {
    let (n, od) = (env.n_agents(), env.obs_dim());
    let c = policy.config();
    if c.n_agents != n || c.obs_dim != od || c.n_actions != env.n_actions() {
        return Err(Error::Contract(format!(
            "rollout: policy built for {} agents x {} features x {} actions, environment has {n} x {od} x {}",
            c.n_agents,
            c.obs_dim,
            c.n_actions,
            env.n_actions()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let new_episode = |rng: &mut ChaCha8Rng, order: &mut Vec<usize>| -> u64 {
        if cfg.permute_agents {
            order.shuffle(rng);
        }
        rng.gen()
    };

    let mut batch = RolloutBatch {
        n_agents: n,
        obs_dim: od,
        obs: Vec::with_capacity(length * n * od),
        actions: Vec::with_capacity(length * n),
        rewards: Vec::with_capacity(length),
        values: Vec::with_capacity(length * n),
        log_probs: Vec::with_capacity(length * n),
        advantages: vec![],
        returns: vec![],
        dones: Vec::with_capacity(length),
        episode_returns: vec![],
    };
    let mut raw = env.reset(new_episode(&mut rng, &mut order));
    let mut episode_return = 0.0;
    for t in 0..length {
        let obs = permuted(&raw, &order, od);
        let decision = policy
            .act(&Array::new([n, od], obs.clone())?, DecodeMode::Sample(rng.gen()))
            .map_err(|e| Error::Contract(format!("rollout step {t}: policy failed: {e}")))?;
        let mut env_actions = vec![0; n];
        for (pos, &agent) in order.iter().enumerate() {
            env_actions[agent] = decision.actions[pos];
        }
        let tr = env
            .step(&env_actions)
            .map_err(|e| Error::Contract(format!("rollout step {t}: environment failed: {e}")))?;
        batch.obs.extend(obs);
        batch.actions.extend(&decision.actions);
        batch.values.extend(&decision.values);
        batch.log_probs.extend(&decision.log_probs);
        batch.rewards.push(tr.reward);
        batch.dones.push(tr.done);
        episode_return += tr.reward;
        raw = tr.obs;
        if tr.done {
            batch.episode_returns.push(episode_return);
            episode_return = 0.0;
            raw = env.reset(new_episode(&mut rng, &mut order));
        }
    }
    let bootstrap = if batch.dones.last() == Some(&true) {
        vec![0.0; n]
    } else {
        let (_, values) = policy.encode_array(&Array::new([n, od], permuted(&raw, &order, od))?)?;
        values
    };
    let (adv, ret) = gae(&batch.rewards, &batch.values, &bootstrap, &batch.dones, cfg.gamma, cfg.gae_lambda)?;
    if let Some(i) = adv.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite { context: "rollout advantages".into(), index: i });
    }
    batch.advantages = adv;
    batch.returns = ret;
    Ok(batch)
}
