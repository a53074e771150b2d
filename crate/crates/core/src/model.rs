//! Joint policies over a team of agents: the Mamba encoder-decoder and the
//! attention baseline with the same interface.
//!
//! Each timestep is a sequence over the agent axis. The encoder maps the
//! joint observation to one representation and one value per agent; the
//! decoder emits agent `i`'s action logits from the representations and the
//! actions of agents `0..i`.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{DecoderBlockParams, DenseParams, EncoderBlockParams, NormParams};
use crate::blocks::{
    bimamba_block, crossmamba_block, mamba_block, mamba_block_step, BlockState, MambaBlockParams, MambaDims,
};
use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::params::uniform_fan_in;
use crate::numerics::{Array, Bound, ParamId, ParamSet, Tape, Var};
use crate::scalar::Scalar;
use crate::ssm::Discretization;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ModelKind {
    #[default]
    Mam,
    Attention,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mam" => Ok(ModelKind::Mam),
            "attention" => Ok(ModelKind::Attention),
            other => Err(Error::Config(format!("unknown model kind `{other}` (expected mam or attention)"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Mam => "mam",
            ModelKind::Attention => "attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub d_model: usize,
    /// SSM state size `N`.
    pub state_dim: usize,
    /// Rank of the step-size projection.
    pub dt_rank: usize,
    pub conv_width: usize,
    /// Mamba blocks in the encoder, and decoder block pairs.
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Encoder and decoder depth of the attention model.
    pub attn_blocks: usize,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub discretization: Discretization,
}

impl ModelConfig {
    pub fn new(n_agents: usize, obs_dim: usize, n_actions: usize) -> Self {
        Self {
            kind: ModelKind::Mam,
            d_model: 128,
            state_dim: 32,
            dt_rank: 128,
            conv_width: 4,
            n_blocks: 1,
            n_heads: 1,
            attn_blocks: 3,
            n_agents,
            obs_dim,
            n_actions,
            discretization: Discretization::Euler,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("state_dim", self.state_dim),
            ("dt_rank", self.dt_rank),
            ("conv_width", self.conv_width),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("attn_blocks", self.attn_blocks),
            ("n_agents", self.n_agents),
            ("obs_dim", self.obs_dim),
            ("n_actions", self.n_actions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.kind == ModelKind::Attention && !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.n_heads ({}) must divide model.d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    pub fn mamba_dims(&self) -> MambaDims {
        MambaDims {
            d_model: self.d_model,
            d_inner: 2 * self.d_model,
            state_dim: self.state_dim,
            dt_rank: self.dt_rank,
            conv_width: self.conv_width,
        }
    }
}

/// How [`JointPolicy::act`] picks each agent's action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Highest logit, lowest index on ties.
    Greedy,
    /// Categorical sampling from a generator seeded with the value.
    Sample(u64),
}

/// How the autoregressive decoder obtains agent `i`'s logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecodeStrategy {
    /// Carry recurrent state from agent to agent (Mamba only).
    #[default]
    Incremental,
    /// Re-run the decoder over the whole prefix for every agent.
    Recompute,
}

/// Result of autoregressive decoding for one joint observation.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDecision<T: Scalar> {
    pub actions: Vec<usize>,
    /// Log-probability of each chosen action.
    pub log_probs: Vec<T>,
    /// `[n, n_actions]` logits each agent's action was drawn from.
    pub logits: Array<T>,
    pub values: Vec<T>,
}

/// Tape outputs of a training forward pass over `B` joint observations.
pub struct PolicyOutput<T: Scalar> {
    /// `[B, n, n_actions]`
    pub logits: Var<T>,
    /// `[B, n]`
    pub values: Var<T>,
}

/// Interface shared by both architectures.
pub trait JointPolicy<T: Scalar> {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Representations `[B, n, D]` and values `[B, n]` of observations
    /// `[B, n, obs_dim]`.
    fn encode(&self, bound: &Bound<T>, obs: &Var<T>) -> Result<(Var<T>, Var<T>)>;

    /// Logits `[B, L, n_actions]` for decoder inputs `tokens` (`B * L`
    /// indices, `n_actions` is the start token) against `repr[:, :L]`.
    fn decode_tokens(&self, bound: &Bound<T>, repr: &Var<T>, tokens: &[usize]) -> Result<Var<T>>;

    /// Autoregressive decoding from one representation `[n, D]`.
    fn decode_autoregressive(
        &self,
        repr: &Array<T>,
        mode: DecodeMode,
        strategy: DecodeStrategy,
    ) -> Result<JointDecision<T>>;

    /// Teacher-forced logits for executed joint actions (`B * n` indices).
    fn decode_parallel(&self, bound: &Bound<T>, repr: &Var<T>, actions: &[usize]) -> Result<Var<T>> {
        let (b, n) = (repr.shape()[0], repr.shape()[1]);
        let tokens = shift_right(actions, b, n, self.config().n_actions)?;
        self.decode_tokens(bound, repr, &tokens)
    }

    fn forward_train(&self, bound: &Bound<T>, obs: &Array<T>, actions: &[usize]) -> Result<PolicyOutput<T>> {
        let tape = bound_tape(bound)?;
        let (repr, values) = self.encode(bound, &tape.constant(obs.clone()))?;
        let logits = self.decode_parallel(bound, &repr, actions)?;
        Ok(PolicyOutput { logits, values })
    }

    /// Gradient-free encode of one joint observation `[n, obs_dim]`.
    fn encode_array(&self, obs: &Array<T>) -> Result<(Array<T>, Vec<T>)> {
        let tape = Tape::inference();
        let bound = self.params().bind(&tape);
        let s = obs.shape();
        let obs = obs.reshape([1, s[0], s[s.len() - 1]])?;
        let (repr, values) = self.encode(&bound, &tape.constant(obs))?;
        let (n, d) = (repr.shape()[1], repr.shape()[2]);
        Ok((repr.value().reshape([n, d])?, values.value().data().to_vec()))
    }

    /// Encode then decode one joint observation.
    fn act(&self, obs: &Array<T>, mode: DecodeMode) -> Result<JointDecision<T>> {
        let (repr, values) = self.encode_array(obs)?;
        let mut decision = self.decode_autoregressive(&repr, mode, DecodeStrategy::Incremental)?;
        decision.values = values;
        Ok(decision)
    }
}

fn bound_tape<T: Scalar>(bound: &Bound<T>) -> Result<Tape<T>> {
    bound.tape().cloned().ok_or_else(|| Error::Contract("policy has no parameters".into()))
}

/// `[start, a_0, ..., a_{n-2}]` per row, rejecting out-of-range actions.
pub fn shift_right(actions: &[usize], batch: usize, n: usize, n_actions: usize) -> Result<Vec<usize>> {
    if actions.len() != batch * n {
        return Err(Error::Contract(format!("{} actions for {batch} x {n} agents", actions.len())));
    }
    if let Some(&bad) = actions.iter().find(|&&a| a >= n_actions) {
        return Err(Error::Contract(format!("action {bad} out of range for {n_actions} actions")));
    }
    let mut tokens = Vec::with_capacity(actions.len());
    for row in actions.chunks(n.max(1)) {
        tokens.push(n_actions);
        tokens.extend_from_slice(&row[..n - 1]);
    }
    Ok(tokens)
}

fn check_obs<T: Scalar>(config: &ModelConfig, obs: &Var<T>) -> Result<()> {
    let s = obs.shape();
    if s.len() != 3 || s[1] != config.n_agents || s[2] != config.obs_dim {
        return Err(Error::Contract(format!(
            "observations {:?} do not match {} agents x {} features",
            s, config.n_agents, config.obs_dim
        )));
    }
    Ok(())
}

fn check_repr<T: Scalar>(config: &ModelConfig, repr: &Array<T>) -> Result<()> {
    if repr.shape() != [config.n_agents, config.d_model] {
        return Err(Error::Contract(format!(
            "representation {:?} does not match {} agents x {} features",
            repr.shape(),
            config.n_agents,
            config.d_model
        )));
    }
    Ok(())
}

/// Parameters both architectures share: observation and action embeddings,
/// value and policy heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Heads {
    obs_embed: DenseParams,
    action_table: ParamId,
    value_head: DenseParams,
    policy_head: DenseParams,
}

impl Heads {
    fn init_embeddings<T: Scalar>(ps: &mut ParamSet<T>, c: &ModelConfig, rng: &mut impl Rng) -> (DenseParams, ParamId) {
        let obs_embed = DenseParams::init(ps, "obs_embed", c.obs_dim, c.d_model, rng);
        let table = ps.add("action_embed", uniform_fan_in(rng, &[c.n_actions + 1, c.d_model]));
        (obs_embed, table)
    }

    fn embed_obs<T: Scalar>(&self, obs: &Var<T>, bound: &Bound<T>) -> Var<T> {
        self.obs_embed.apply(obs, bound).gelu()
    }

    fn embed_actions<T: Scalar>(&self, tokens: &[usize], b: usize, l: usize, bound: &Bound<T>) -> Result<Var<T>> {
        Var::embedding(&bound[self.action_table], tokens, &[b, l])
    }

    fn values<T: Scalar>(&self, x: &Var<T>, bound: &Bound<T>) -> Var<T> {
        let s = x.shape();
        let (b, n) = (s[0], s[1]);
        self.value_head.apply(x, bound).reshape(&[b, n])
    }
}

fn select<T: Scalar>(logits: &[T], rng: Option<&mut ChaCha8Rng>) -> (usize, T) {
    let row = Array::from_parts(vec![1, logits.len()], logits.to_vec());
    let logp = ops::log_softmax_rows(&row);
    let action = match rng {
        None => ops::argmax(logits),
        Some(rng) => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = logits.len() - 1;
            for (i, lp) in logp.data().iter().enumerate() {
                acc += lp.as_f64().exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (action, logp.data()[action])
}

/// Shared autoregressive loop. `next_logits(i, actions_so_far)` returns
/// agent `i`'s logits.
fn autoregressive<T: Scalar>(
    n: usize,
    n_actions: usize,
    mode: DecodeMode,
    mut next_logits: impl FnMut(usize, &[usize]) -> Result<Vec<T>>,
) -> Result<JointDecision<T>> {
    let mut rng = match mode {
        DecodeMode::Greedy => None,
        DecodeMode::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut actions = Vec::with_capacity(n);
    let mut log_probs = Vec::with_capacity(n);
    let mut all_logits = Vec::with_capacity(n * n_actions);
    for i in 0..n {
        let logits = next_logits(i, &actions)?;
        let (a, lp) = select(&logits, rng.as_mut());
        actions.push(a);
        log_probs.push(lp);
        all_logits.extend(logits);
    }
    Ok(JointDecision {
        actions,
        log_probs,
        logits: Array::from_parts(vec![n, n_actions], all_logits),
        values: Vec::new(),
    })
}

/// Logits of the last position from a gradient-free decoder pass over the
/// prefix `[start, actions...]`.
fn recompute_last<T: Scalar, P: JointPolicy<T> + ?Sized>(
    policy: &P,
    repr: &Array<T>,
    actions: &[usize],
) -> Result<Vec<T>> {
    let c = policy.config();
    let len = actions.len() + 1;
    let tape = Tape::inference();
    let bound = policy.params().bind(&tape);
    let prefix = Array::from_parts(vec![1, len, c.d_model], repr.data()[..len * c.d_model].to_vec());
    let mut tokens = vec![c.n_actions];
    tokens.extend_from_slice(actions);
    let logits = policy.decode_tokens(&bound, &tape.constant(prefix), &tokens)?;
    Ok(logits.value().data()[(len - 1) * c.n_actions..].to_vec())
}

/// Multi-agent Mamba: bi-directional encoder blocks, then decoder pairs of
/// a causal block over actions and a cross block reading the encoder.
#[derive(Clone, Debug)]
pub struct MamModel<T: Scalar> {
    config: ModelConfig,
    params: ParamSet<T>,
    heads: Heads,
    encoder: Vec<MambaBlockParams>,
    encoder_norm: NormParams,
    decoder: Vec<(MambaBlockParams, MambaBlockParams)>,
    decoder_norm: NormParams,
}

impl<T: Scalar> MamModel<T> {
    /// Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let dims = config.mamba_dims();
        let (obs_embed, action_table) = Heads::init_embeddings(&mut ps, config, &mut rng);
        let encoder = (0..config.n_blocks)
            .map(|i| MambaBlockParams::init_self(&mut ps, &format!("encoder.{i}"), dims, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = NormParams::init(&mut ps, "encoder.norm", config.d_model);
        let value_head = DenseParams::init(&mut ps, "value_head", config.d_model, 1, &mut rng);
        let decoder = (0..config.n_blocks)
            .map(|i| {
                Ok((
                    MambaBlockParams::init_self(&mut ps, &format!("decoder.{i}.self"), dims, &mut rng)?,
                    MambaBlockParams::init(&mut ps, &format!("decoder.{i}.cross"), dims, config.d_model, &mut rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = NormParams::init(&mut ps, "decoder.norm", config.d_model);
        let policy_head = DenseParams::init(&mut ps, "policy_head", config.d_model, config.n_actions, &mut rng);
        Ok(Self {
            config: config.clone(),
            params: ps,
            heads: Heads { obs_embed, action_table, value_head, policy_head },
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
        })
    }

    pub fn encoder_blocks(&self) -> &[MambaBlockParams] {
        &self.encoder
    }

    pub fn decoder_blocks(&self) -> &[(MambaBlockParams, MambaBlockParams)] {
        &self.decoder
    }

    /// One-token-at-a-time decoding with per-block recurrent state.
    fn decode_incremental(&self, repr: &Array<T>, mode: DecodeMode) -> Result<JointDecision<T>> {
        let c = &self.config;
        let dims = c.mamba_dims();
        let ps = &self.params;
        let mut states: Vec<(BlockState<T>, BlockState<T>)> =
            self.decoder.iter().map(|_| (BlockState::new(&dims), BlockState::new(&dims))).collect();
        let table = &ps[self.heads.action_table];
        let variant = c.discretization;
        autoregressive(c.n_agents, c.n_actions, mode, |i, actions| {
            let token = actions.last().copied().unwrap_or(c.n_actions);
            let mut x = table.row(token).to_vec();
            let source = repr.row(i);
            for ((own, cross), (s_own, s_cross)) in self.decoder.iter().zip(states.iter_mut()) {
                x = mamba_block_step(&x, None, own, ps, s_own, variant);
                x = mamba_block_step(&x, Some(source), cross, ps, s_cross, variant);
            }
            let row = Array::from_parts(vec![1, c.d_model], x);
            let z = ops::layer_norm(&row, &ps[self.decoder_norm.scale], &ps[self.decoder_norm.offset]);
            let head = &self.heads.policy_head;
            Ok(ops::linear(&z, &ps[head.weight], Some(&ps[head.bias])).into_vec())
        })
    }
}

impl<T: Scalar> JointPolicy<T> for MamModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn encode(&self, bound: &Bound<T>, obs: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        check_obs(&self.config, obs)?;
        let mut x = self.heads.embed_obs(obs, bound);
        for block in &self.encoder {
            x = bimamba_block(&x, block, bound, self.config.discretization);
        }
        let repr = self.encoder_norm.apply(&x, bound);
        let values = self.heads.values(&repr, bound);
        Ok((repr, values))
    }

    fn decode_tokens(&self, bound: &Bound<T>, repr: &Var<T>, tokens: &[usize]) -> Result<Var<T>> {
        let b = repr.shape()[0];
        let l = tokens.len() / b.max(1);
        let source = repr.slice(1, 0, l);
        let mut x = self.heads.embed_actions(tokens, b, l, bound)?;
        for (own, cross) in &self.decoder {
            x = mamba_block(&x, own, bound, self.config.discretization);
            x = crossmamba_block(&x, &source, cross, bound, self.config.discretization)?;
        }
        Ok(self.heads.policy_head.apply(&self.decoder_norm.apply(&x, bound), bound))
    }

    fn decode_autoregressive(
        &self,
        repr: &Array<T>,
        mode: DecodeMode,
        strategy: DecodeStrategy,
    ) -> Result<JointDecision<T>> {
        check_repr(&self.config, repr)?;
        match strategy {
            DecodeStrategy::Incremental => self.decode_incremental(repr, mode),
            DecodeStrategy::Recompute => {
                autoregressive(self.config.n_agents, self.config.n_actions, mode, |_, actions| {
                    recompute_last(self, repr, actions)
                })
            }
        }
    }
}

/// Attention encoder-decoder baseline. Autoregressive decoding always
/// recomputes the full prefix.
#[derive(Clone, Debug)]
pub struct AttentionModel<T: Scalar> {
    config: ModelConfig,
    params: ParamSet<T>,
    heads: Heads,
    encoder: Vec<EncoderBlockParams>,
    value_norm: NormParams,
    decoder: Vec<DecoderBlockParams>,
    decoder_norm: NormParams,
}

impl<T: Scalar> AttentionModel<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (d, h) = (config.d_model, config.n_heads);
        let (obs_embed, action_table) = Heads::init_embeddings(&mut ps, config, &mut rng);
        let encoder = (0..config.attn_blocks)
            .map(|i| EncoderBlockParams::init(&mut ps, &format!("encoder.{i}"), d, h, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let value_norm = NormParams::init(&mut ps, "value_norm", d);
        let value_head = DenseParams::init(&mut ps, "value_head", d, 1, &mut rng);
        let decoder = (0..config.attn_blocks)
            .map(|i| DecoderBlockParams::init(&mut ps, &format!("decoder.{i}"), d, h, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = NormParams::init(&mut ps, "decoder.norm", d);
        let policy_head = DenseParams::init(&mut ps, "policy_head", d, config.n_actions, &mut rng);
        Ok(Self {
            config: config.clone(),
            params: ps,
            heads: Heads { obs_embed, action_table, value_head, policy_head },
            encoder,
            value_norm,
            decoder,
            decoder_norm,
        })
    }
}

impl<T: Scalar> JointPolicy<T> for AttentionModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn encode(&self, bound: &Bound<T>, obs: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        check_obs(&self.config, obs)?;
        let mut x = self.heads.embed_obs(obs, bound);
        for block in &self.encoder {
            x = block.apply(&x, bound);
        }
        let values = self.heads.values(&self.value_norm.apply(&x, bound), bound);
        Ok((x, values))
    }

    fn decode_tokens(&self, bound: &Bound<T>, repr: &Var<T>, tokens: &[usize]) -> Result<Var<T>> {
        let b = repr.shape()[0];
        let l = tokens.len() / b.max(1);
        let mut y = self.heads.embed_actions(tokens, b, l, bound)?;
        for block in &self.decoder {
            y = block.apply(&y, repr, bound);
        }
        Ok(self.heads.policy_head.apply(&self.decoder_norm.apply(&y, bound), bound))
    }

    fn decode_autoregressive(
        &self,
        repr: &Array<T>,
        mode: DecodeMode,
        _strategy: DecodeStrategy,
    ) -> Result<JointDecision<T>> {
        check_repr(&self.config, repr)?;
        autoregressive(self.config.n_agents, self.config.n_actions, mode, |_, actions| {
            recompute_last(self, repr, actions)
        })
    }
}

/// Builds the architecture selected by `config.kind`.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Box<dyn JointPolicy<T>>> {
    Ok(match config.kind {
        ModelKind::Mam => Box::new(MamModel::init(config, seed)?),
        ModelKind::Attention => Box::new(AttentionModel::init(config, seed)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ModelKind, n: usize) -> ModelConfig {
        ModelConfig {
            kind,
            d_model: 8,
            state_dim: 4,
            dt_rank: 2,
            attn_blocks: 2,
            n_heads: 2,
            ..ModelConfig::new(n, 5, 3)
        }
    }

    fn obs(n: usize, salt: f64) -> Array<f64> {
        Array::from_fn([n, 5], |i| ((i as f64) * 0.7 + salt).sin())
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = small(ModelKind::Mam, 3);
        c.state_dim = 0;
        assert!(matches!(MamModel::<f64>::init(&c, 0), Err(Error::Config(m)) if m.contains("state_dim")));
        let mut c = small(ModelKind::Attention, 3);
        c.n_heads = 3;
        assert!(matches!(AttentionModel::<f64>::init(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        for kind in [ModelKind::Mam, ModelKind::Attention] {
            let a = init_model::<f64>(&small(kind, 3), 42).unwrap();
            let b = init_model::<f64>(&small(kind, 3), 42).unwrap();
            let c = init_model::<f64>(&small(kind, 3), 43).unwrap();
            assert!(a.params().bit_eq(b.params()));
            assert!(!a.params().bit_eq(c.params()));
        }
    }

    #[test]
    fn shift_right_inserts_start_token() {
        assert_eq!(shift_right(&[2, 0, 1, 1, 1, 0], 2, 3, 3).unwrap(), vec![3, 2, 0, 3, 1, 1]);
        assert!(matches!(shift_right(&[3, 0, 1], 1, 3, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn agent_count_mismatch_is_contract_violation() {
        let m = MamModel::<f64>::init(&small(ModelKind::Mam, 3), 0).unwrap();
        assert!(matches!(m.encode_array(&obs(4, 0.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn incremental_decode_matches_recompute_and_teacher_forcing() {
        for n in 1..=5 {
            let m = MamModel::<f64>::init(&small(ModelKind::Mam, n), n as u64).unwrap();
            let (repr, values) = m.encode_array(&obs(n, 0.3)).unwrap();
            assert_eq!(values.len(), n);
            let inc = m.decode_autoregressive(&repr, DecodeMode::Greedy, DecodeStrategy::Incremental).unwrap();
            let rec = m.decode_autoregressive(&repr, DecodeMode::Greedy, DecodeStrategy::Recompute).unwrap();
            assert_eq!(inc.actions, rec.actions);
            assert!(inc.logits.max_abs_diff(&rec.logits) <= 1e-10);

            let tape = Tape::inference();
            let bound = m.params().bind(&tape);
            let r = tape.constant(repr.reshape([1, n, 8]).unwrap());
            let tf = m.decode_parallel(&bound, &r, &inc.actions).unwrap();
            assert!(tf.value().reshape([n, 3]).unwrap().max_abs_diff(&inc.logits) <= 1e-6);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = AttentionModel::<f64>::init(&small(ModelKind::Attention, 4), 1).unwrap();
        let a = m.act(&obs(4, 1.0), DecodeMode::Sample(9)).unwrap();
        let b = m.act(&obs(4, 1.0), DecodeMode::Sample(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_residual_identity() {
        let mut m = AttentionModel::<f64>::init(&small(ModelKind::Attention, 3), 2).unwrap();
        m.params_mut()
            .zero_where(|name| name.starts_with("encoder.") && (name.contains(".attn.") || name.contains(".ff.")));
        let o = obs(3, 0.1);
        let (repr, _) = m.encode_array(&o).unwrap();
        let tape = Tape::inference();
        let bound = m.params().bind(&tape);
        let emb = m.heads.embed_obs(&tape.constant(o.reshape([1, 3, 5]).unwrap()), &bound);
        assert!(repr.bit_eq(&emb.value().reshape([3, 8]).unwrap()));
    }
}
