//! On-policy training loop.

use mam_core::{Array, DecodeMode, Error, JointPolicy, Result, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::MarkovGame;
use crate::loss::{categorical_entropy, mappo_loss, LossCoefficients, LossDiagnostics};
use crate::optim::{clip_global_norm, Adam};
use crate::rollout::{collect_rollout, RolloutBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub rollout_length: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    /// Shuffle the agent order of the sequence models once per episode.
    pub permute_agents: bool,
    /// Number of collect-then-update iterations.
    pub updates: usize,
    /// Greedy evaluation every this many updates.
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.9,
            clip: 0.1,
            entropy_coef: 0.01,
            value_coef: 0.5,
            rollout_length: 128,
            epochs: 2,
            minibatches: 1,
            learning_rate: 1e-3,
            max_grad_norm: 5.0,
            permute_agents: false,
            updates: 200,
            eval_interval: 10,
            eval_episodes: 32,
        }
    }
}

/// False for NaN as well as for non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("train.{msg}")));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !positive(self.clip) {
            return bad("clip must be positive");
        }
        if !positive(self.learning_rate) {
            return bad("learning_rate must be positive");
        }
        if !positive(self.max_grad_norm) {
            return bad("max_grad_norm must be positive");
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        for (name, v) in [
            ("rollout_length", self.rollout_length),
            ("epochs", self.epochs),
            ("minibatches", self.minibatches),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.minibatches > self.rollout_length {
            return bad("minibatches must not exceed rollout_length");
        }
        Ok(())
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients { clip: self.clip, value: self.value_coef, entropy: self.entropy_coef }
    }
}

/// Averages of the per-minibatch diagnostics of one update.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct UpdateStats {
    pub loss: LossDiagnostics,
    pub grad_norm: f64,
}

/// Loss on the steps `idx` of `batch`.
fn minibatch_loss(
    policy: &dyn JointPolicy<f64>,
    bound: &mam_core::Bound<f64>,
    batch: &RolloutBatch,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(mam_core::Var<f64>, LossDiagnostics)> {
    let (n, od) = (batch.n_agents, batch.obs_dim);
    let b = idx.len();
    let mut obs = Vec::with_capacity(b * n * od);
    let (mut actions, mut old, mut adv, mut ret) = (vec![], vec![], vec![], vec![]);
    for &t in idx {
        obs.extend_from_slice(&batch.obs[t * n * od..(t + 1) * n * od]);
        let r = t * n..(t + 1) * n;
        actions.extend_from_slice(&batch.actions[r.clone()]);
        old.extend_from_slice(&batch.log_probs[r.clone()]);
        adv.extend_from_slice(&batch.advantages[r.clone()]);
        ret.extend_from_slice(&batch.returns[r]);
    }
    let out = policy.forward_train(bound, &Array::new([b, n, od], obs)?, &actions)?;
    let logp = out.logits.log_softmax_last().gather_last(&actions)?;
    let entropy = categorical_entropy(&out.logits);
    mappo_loss(
        &logp,
        &Array::new([b, n], old)?,
        &Array::new([b, n], adv)?,
        &out.values,
        &Array::new([b, n], ret)?,
        &entropy,
        &cfg.coefficients(),
    )
}

/// Epochs of clipped-objective minibatch updates on one rollout.
pub fn ppo_update(
    policy: &mut dyn JointPolicy<f64>,
    opt: &mut Adam<f64>,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    let steps = batch.steps();
    let mut order: Vec<usize> = (0..steps).collect();
    let mut acc = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for k in 0..cfg.minibatches {
            let idx = &order[k * steps / cfg.minibatches..(k + 1) * steps / cfg.minibatches];
            let tape = Tape::new();
            let bound = policy.params().bind(&tape);
            let (loss, diag) = minibatch_loss(&*policy, &bound, batch, idx, cfg)?;
            let mut grads = bound.gradients(&tape.backward(&loss)?);
            drop((loss, bound, tape));
            let norm = clip_global_norm(&mut grads, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::NonFinite { context: "gradient norm".into(), index: 0 });
            }
            opt.step(policy.params_mut(), &grads)?;
            let l = &mut acc.loss;
            l.total += diag.total;
            l.policy += diag.policy;
            l.value += diag.value;
            l.entropy += diag.entropy;
            l.clip_fraction += diag.clip_fraction;
            l.approx_kl += diag.approx_kl;
            acc.grad_norm += norm;
            count += 1.0;
        }
    }
    let l = &mut acc.loss;
    for v in [&mut l.total, &mut l.policy, &mut l.value, &mut l.entropy, &mut l.clip_fraction, &mut l.approx_kl] {
        *v /= count;
    }
    acc.grad_norm /= count;
    Ok(acc)
}

/// Greedy episode returns over `episodes` fresh episodes.
pub fn evaluate(
    env: &mut dyn MarkovGame,
    policy: &dyn JointPolicy<f64>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (n, od) = (env.n_agents(), env.obs_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(rng.gen());
        let mut total = 0.0;
        loop {
            let decision = policy.act(&Array::new([n, od], obs)?, DecodeMode::Greedy)?;
            let tr = env.step(&decision.actions)?;
            total += tr.reward;
            obs = tr.obs;
            if tr.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Statistics of one collect-then-update iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub update: usize,
    pub env_steps: usize,
    /// Mean return of the episodes completed during collection, if any.
    pub rollout_return: Option<f64>,
    pub stats: UpdateStats,
}

/// Owns the environment, the policy and the optimizer state.
pub struct Trainer {
    pub env: Box<dyn MarkovGame>,
    pub policy: Box<dyn JointPolicy<f64>>,
    pub cfg: TrainConfig,
    opt: Adam<f64>,
    rng: ChaCha8Rng,
    updates: usize,
}

impl Trainer {
    pub fn new(
        env: Box<dyn MarkovGame>,
        policy: Box<dyn JointPolicy<f64>>,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = policy.config();
        if (c.n_agents, c.obs_dim, c.n_actions) != (env.n_agents(), env.obs_dim(), env.n_actions()) {
            return Err(Error::Contract(format!(
                "model expects (agents, obs_dim, actions) = ({}, {}, {}), environment has ({}, {}, {})",
                c.n_agents,
                c.obs_dim,
                c.n_actions,
                env.n_agents(),
                env.obs_dim(),
                env.n_actions()
            )));
        }
        let opt = Adam::new(policy.params(), cfg.learning_rate);
        Ok(Self { env, policy, cfg, opt, rng: ChaCha8Rng::seed_from_u64(seed), updates: 0 })
    }

    pub fn updates_done(&self) -> usize {
        self.updates
    }

    pub fn iterate(&mut self) -> Result<IterationStats> {
        let seed = self.rng.gen();
        let batch = collect_rollout(self.env.as_mut(), self.policy.as_ref(), self.cfg.rollout_length, seed, &self.cfg)?;
        let stats = ppo_update(self.policy.as_mut(), &mut self.opt, &batch, &self.cfg, &mut self.rng)?;
        self.updates += 1;
        let rollout_return = (!batch.episode_returns.is_empty())
            .then(|| batch.episode_returns.iter().sum::<f64>() / batch.episode_returns.len() as f64);
        Ok(IterationStats {
            update: self.updates,
            env_steps: self.updates * self.cfg.rollout_length,
            rollout_return,
            stats,
        })
    }

    /// Greedy returns with a seed drawn from the trainer's stream.
    pub fn evaluate(&mut self) -> Result<Vec<f64>> {
        let seed = self.rng.gen();
        evaluate(self.env.as_mut(), self.policy.as_ref(), self.cfg.eval_episodes, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ConsensusGame;
    use mam_core::{init_model, ModelConfig, ModelKind};

    fn tiny(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            d_model: 8,
            state_dim: 4,
            dt_rank: 4,
            n_heads: 1,
            attn_blocks: 1,
            ..ModelConfig::new(2, 5, 3)
        }
    }

    #[test]
    fn defaults_validate_and_bad_values_do_not() {
        TrainConfig::default().validate().unwrap();
        for cfg in [
            TrainConfig { gamma: 1.0, ..Default::default() },
            TrainConfig { clip: 0.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn mismatched_environment_is_rejected() {
        let env = Box::new(ConsensusGame::new(3, 3, 4).unwrap());
        let policy = init_model::<f64>(&tiny(ModelKind::Mam), 0).unwrap();
        assert!(matches!(Trainer::new(env, policy, TrainConfig::default(), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn iterations_are_deterministic_and_change_parameters() {
        let run = |kind| {
            let env = Box::new(ConsensusGame::new(2, 3, 4).unwrap());
            let policy = init_model::<f64>(&tiny(kind), 1).unwrap();
            let cfg = TrainConfig { rollout_length: 16, minibatches: 2, ..Default::default() };
            let mut tr = Trainer::new(env, policy, cfg, 9).unwrap();
            let before = tr.policy.params().clone();
            let stats: Vec<_> = (0..2).map(|_| tr.iterate().unwrap()).collect();
            assert!(!tr.policy.params().bit_eq(&before));
            (stats, tr.policy.params().clone(), tr.evaluate().unwrap())
        };
        for kind in [ModelKind::Mam, ModelKind::Attention] {
            let (a, pa, ea) = run(kind);
            let (b, pb, eb) = run(kind);
            assert_eq!(a, b);
            assert!(pa.bit_eq(&pb));
            assert_eq!(ea, eb);
            assert_eq!(a[1].env_steps, 32);
            assert_eq!(a[0].rollout_return.map(|r| r <= 4.0), Some(true));
        }
    }
}
