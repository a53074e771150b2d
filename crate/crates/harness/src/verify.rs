//! Verification suites. Each suite draws its own random instances from a
//! seed and compares an implementation against an independent oracle.

use std::time::Instant;

use mam_core::attention::{DecoderBlockParams, EncoderBlockParams};
use mam_core::blocks::{bimamba_block, crossmamba_block, mamba_block, MambaBlockParams, MambaDims};
use mam_core::numerics::check_param_gradients;
use mam_core::ssm::{
    apply_implicit_attention, build_scan_steps, implicit_attention_matrix, scan_parallel, scan_sequential,
    selective_parameters, Discretization, SelectiveSsmParams,
};
use mam_core::{
    init_model, Array64, Bound, DecodeMode, DecodeStrategy, JointPolicy, ModelConfig, ModelKind, ParamSet64,
    Result as CoreResult, Tape, Var,
};
use mam_marl::{advantage_decomposition_check, categorical_entropy, gae, mappo_loss, permutations};
use mam_marl::{LossCoefficients, ProductPolicy, TabularGame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Fault;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Largest permitted value of `observed`.
    pub tolerance: f64,
    /// Worst error found (or violation count for structural checks).
    pub observed: f64,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub fault: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn finish(name: &str, tolerance: f64, observed: f64, cases: usize, detail: String, started: Instant) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        tolerance,
        observed,
        passed: observed <= tolerance,
        cases,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array64 {
    Array64::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Scan output against the materialized implicit attention matrix applied
/// to the input, for learned selective parameters with `L <= 8`, `N <= 4`
/// and `D` in {2, 4}.
pub fn scan_vs_matrix(draws: usize, seed: u64, fault: Fault) -> CheckResult {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for _ in 0..draws {
        let l = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=4);
        let d = if rng.gen_bool(0.5) { 2 } else { 4 };
        let rank = rng.gen_range(1..=d);
        let mut ps = ParamSet64::new();
        let p = SelectiveSsmParams::init(&mut ps, "ssm", d, n, rank, d, &mut rng).expect("positive sizes");
        // Spread the step sizes well beyond their initial range.
        for v in ps.get_mut(p.dt_bias).data_mut() {
            *v = rng.gen_range(-5.0..1.0);
        }
        for v in ps.get_mut(p.a_log).data_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
        let x = uniform(&mut rng, &[l, d], -2.0, 2.0);
        for variant in [Discretization::Euler, Discretization::Zoh] {
            let scan_variant = match (fault, variant) {
                (Fault::ZohScan, Discretization::Euler) => Discretization::Zoh,
                _ => variant,
            };
            let lambda = implicit_attention_matrix(&x, &p, &ps, variant).expect("aligned");
            let via_matrix = apply_implicit_attention(&lambda, &x, &ps[p.d]).expect("aligned");
            let sel = selective_parameters(&x, None, &p, &ps).expect("aligned");
            let steps =
                build_scan_steps(&x, &sel.delta, &p.a_matrix(&ps), &sel.b, &sel.c, scan_variant).expect("aligned");
            let via_scan = scan_sequential(&steps, &x, &ps[p.d]).expect("aligned");
            worst = worst.max(via_matrix.max_abs_diff(&via_scan));
            cases += 1;
        }
    }
    finish("scan_vs_implicit_matrix", 1e-8, worst, cases, format!("{draws} draws x 2 discretizations"), started)
}

/// Pairwise-tree scan against the sequential recurrence, `L` up to 64.
pub fn parallel_vs_sequential(draws: usize, seed: u64) -> CheckResult {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..draws {
        let l = rng.gen_range(1..=64);
        let e = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=4);
        let x = uniform(&mut rng, &[l, e], -1.0, 1.0);
        let delta = uniform(&mut rng, &[l, e], 0.01, 1.5);
        let a = uniform(&mut rng, &[e, n], -3.0, -0.1);
        let b = uniform(&mut rng, &[l, n], -1.0, 1.0);
        let c = uniform(&mut rng, &[l, n], -1.0, 1.0);
        let d = uniform(&mut rng, &[e], -1.0, 1.0);
        let variant = if k % 2 == 0 { Discretization::Euler } else { Discretization::Zoh };
        let steps = build_scan_steps(&x, &delta, &a, &b, &c, variant).expect("aligned");
        let seq = scan_sequential(&steps, &x, &d).expect("aligned");
        let par = scan_parallel(&steps, &x, &d).expect("aligned");
        worst = worst.max(seq.max_abs_diff(&par));
    }
    finish("parallel_vs_sequential_scan", 1e-10, worst, draws, format!("L in 1..=64, {draws} draws"), started)
}

const GRAD_DIMS: MambaDims = MambaDims { d_model: 4, d_inner: 8, state_dim: 3, dt_rank: 2, conv_width: 3 };

/// `sum(out * w)` for a fixed random `w`.
fn probe(out: &Var<f64>, w: &Array64) -> Var<f64> {
    out.mul(&out.tape().constant(w.clone())).sum()
}

/// One component's gradient check: `(name, parameters checked, worst relative error)`.
type GradPart = (String, usize, f64);

fn grad_part(
    name: &str,
    ps: &ParamSet64,
    loss: impl Fn(&Bound<f64>) -> CoreResult<Var<f64>>,
    samples: usize,
    seed: u64,
) -> CoreResult<GradPart> {
    let r = check_param_gradients(ps, loss, samples, 1e-5, seed)?;
    Ok((name.to_string(), r.checked, r.max_rel_error))
}

/// Redraws every `dt_bias` so that `softplus` spans roughly [0.1, 1.3]; at
/// the default initial step sizes the state decay barely moves the output
/// and its gradient drowns in finite-difference roundoff.
fn spread_step_sizes(ps: &mut ParamSet64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = ps.ids().filter(|&id| ps.name(id).ends_with("dt_bias")).collect();
    for id in ids {
        for v in ps.get_mut(id).data_mut() {
            *v = rng.gen_range(-2.0..1.0);
        }
    }
}

fn block_gradients(samples: usize, seed: u64) -> CoreResult<Vec<GradPart>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Blocks are pre-normed, so small inputs leave every parameter gradient
    // intact while shrinking the residual term's share of the loss roundoff.
    let x = uniform(&mut rng, &[2, 5, 4], -0.1, 0.1);
    let src = uniform(&mut rng, &[2, 5, 4], -0.1, 0.1);
    let w = uniform(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let mut parts = vec![];
    for variant in [Discretization::Euler, Discretization::Zoh] {
        let mut ps = ParamSet64::new();
        let p = MambaBlockParams::init_self(&mut ps, "block", GRAD_DIMS, &mut rng)?;
        spread_step_sizes(&mut ps, &mut rng);
        type BlockFn = fn(&Var<f64>, &MambaBlockParams, &Bound<f64>, Discretization) -> Var<f64>;
        for (kind, f) in [("mamba", mamba_block as BlockFn), ("bimamba", bimamba_block as BlockFn)] {
            parts.push(grad_part(
                &format!("{kind}_block/{variant}"),
                &ps,
                |bd| Ok(probe(&f(&bd[p.norm_scale].tape().constant(x.clone()), &p, bd, variant), &w)),
                samples,
                seed + 1,
            )?);
        }
        let mut ps = ParamSet64::new();
        let p = MambaBlockParams::init(&mut ps, "cross", GRAD_DIMS, 4, &mut rng)?;
        spread_step_sizes(&mut ps, &mut rng);
        parts.push(grad_part(
            &format!("crossmamba_block/{variant}"),
            &ps,
            |bd| {
                let tape = bd[p.norm_scale].tape();
                Ok(probe(
                    &crossmamba_block(&tape.constant(x.clone()), &tape.constant(src.clone()), &p, bd, variant)?,
                    &w,
                ))
            },
            samples,
            seed + 2,
        )?);
    }
    let mut ps = ParamSet64::new();
    let enc = EncoderBlockParams::init(&mut ps, "enc", 4, 2, &mut rng)?;
    let dec = DecoderBlockParams::init(&mut ps, "dec", 4, 2, &mut rng)?;
    parts.push(grad_part(
        "attention_blocks",
        &ps,
        |bd| {
            let tape = bd[enc.attn_norm.scale].tape();
            let repr = enc.apply(&tape.constant(x.clone()), bd);
            Ok(probe(&dec.apply(&tape.constant(src.clone()), &repr, bd), &w))
        },
        samples,
        seed + 3,
    )?);
    Ok(parts)
}

/// Full clipped-objective loss of a small model on a random batch whose
/// stored log-probabilities sit near the current ones.
fn model_loss_gradient(kind: ModelKind, samples: usize, seed: u64) -> CoreResult<GradPart> {
    let cfg = ModelConfig {
        kind,
        d_model: 4,
        state_dim: 3,
        dt_rank: 2,
        conv_width: 3,
        n_heads: 2,
        attn_blocks: 1,
        ..ModelConfig::new(3, 5, 3)
    };
    let mut policy = init_model::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spread_step_sizes(policy.params_mut(), &mut rng);
    let policy = policy;
    let (b, n) = (4, 3);
    let obs = uniform(&mut rng, &[b, n, 5], -1.0, 1.0);
    let actions: Vec<usize> = (0..b * n).map(|_| rng.gen_range(0..3)).collect();
    let adv = uniform(&mut rng, &[b, n], -1.0, 1.0);
    let ret = uniform(&mut rng, &[b, n], -1.0, 1.0);
    let current = {
        let tape = Tape::inference();
        let out = policy.forward_train(&policy.params().bind(&tape), &obs, &actions)?;
        let logp = out.logits.log_softmax_last().gather_last(&actions)?;
        logp.value().clone()
    };
    let jitter = uniform(&mut rng, current.shape(), -0.03, 0.03);
    let old = current.zip_map(&jitter, |a, b| a + b);
    let coef = LossCoefficients { clip: 0.1, value: 0.5, entropy: 0.01 };
    let loss = |bd: &Bound<f64>| {
        let out = policy.forward_train(bd, &obs, &actions)?;
        let logp = out.logits.log_softmax_last().gather_last(&actions)?;
        let entropy = categorical_entropy(&out.logits);
        Ok(mappo_loss(&logp, &old, &adv, &out.values, &ret, &entropy, &coef)?.0)
    };
    grad_part(&format!("{kind}_model_loss"), policy.params(), loss, samples, seed + 7)
}

/// Reverse-mode gradients against central differences for every block type
/// and for the full training loss of both models, over `draws` independent
/// parameter draws per component.
pub fn gradient_checks(draws: usize, samples_per_draw: usize, seed: u64) -> CheckResult {
    let started = Instant::now();
    let mut parts: Vec<GradPart> = vec![];
    for draw in 0..draws as u64 {
        let s = seed.wrapping_add(1000 * draw);
        let found = block_gradients(samples_per_draw, s).and_then(|mut found| {
            for kind in [ModelKind::Mam, ModelKind::Attention] {
                found.push(model_loss_gradient(kind, samples_per_draw, s)?);
            }
            Ok(found)
        });
        let found = match found {
            Ok(f) => f,
            Err(e) => return finish("gradient_checks", 1e-4, f64::INFINITY, 0, e.to_string(), started),
        };
        for (name, checked, err) in found {
            match parts.iter_mut().find(|p| p.0 == name) {
                Some(p) => {
                    p.1 += checked;
                    p.2 = p.2.max(err);
                }
                None => parts.push((name, checked, err)),
            }
        }
    }
    let checked = parts.iter().map(|p| p.1).sum();
    let worst = parts.iter().map(|p| p.2).fold(0.0, f64::max);
    let detail = parts.iter().map(|(n, c, e)| format!("{n}: {c} params, {e:.2e}")).collect::<Vec<_>>().join("; ");
    finish("gradient_checks", 1e-4, worst, checked, detail, started)
}

/// Small models of both kinds with `n` cycling through 2..=8.
fn small_models(count: usize, seed: u64) -> Vec<Box<dyn JointPolicy<f64>>> {
    (0..count)
        .map(|i| {
            let kind = if i % 2 == 0 { ModelKind::Mam } else { ModelKind::Attention };
            let cfg = ModelConfig {
                kind,
                d_model: 8,
                state_dim: 4,
                dt_rank: 4,
                n_heads: 2,
                attn_blocks: 2,
                n_blocks: 1 + i % 2,
                ..ModelConfig::new(2 + i % 7, 6, 4)
            };
            init_model::<f64>(&cfg, seed + i as u64).expect("valid config")
        })
        .collect()
}

fn teacher_forced(m: &dyn JointPolicy<f64>, repr: &Array64, actions: &[usize]) -> CoreResult<Array64> {
    let (n, d) = (repr.shape()[0], repr.shape()[1]);
    let tape = Tape::inference();
    let bound = m.params().bind(&tape);
    let logits = m.decode_parallel(&bound, &tape.constant(repr.reshape([1, n, d])?), actions)?;
    logits.value().reshape([n, m.config().n_actions])
}

/// Moving one agent's observation must move every agent's representation
/// and value.
pub fn encoder_dependence(models: usize, seed: u64) -> CheckResult {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut violations, mut cases) = (0usize, 0usize);
    for m in small_models(models, seed) {
        let n = m.config().n_agents;
        let obs = uniform(&mut rng, &[n, 6], -1.0, 1.0);
        let (repr, values) = m.encode_array(&obs).expect("valid obs");
        for j in 0..n {
            let mut o2 = obs.clone();
            o2.data_mut()[j * 6 + rng.gen_range(0..6)] += 0.5;
            let (repr2, values2) = m.encode_array(&o2).expect("valid obs");
            for i in 0..n {
                cases += 1;
                if repr.row(i) == repr2.row(i) || values[i] == values2[i] {
                    violations += 1;
                }
            }
        }
    }
    finish(
        "encoder_full_dependence",
        0.0,
        violations as f64,
        cases,
        format!("{models} models, n in 2..=8; observed = unaffected (agent, perturbed agent) pairs"),
        started,
    )
}

fn run_cross(
    ps: &ParamSet64,
    p: &MambaBlockParams,
    target: &Array64,
    source: &Array64,
    variant: Discretization,
) -> Array64 {
    let tape = Tape::inference();
    let bound = ps.bind(&tape);
    let out = crossmamba_block(&tape.constant(target.clone()), &tape.constant(source.clone()), p, &bound, variant);
    out.expect("matching lengths").value().clone()
}

/// Perturbs each source token of a fresh CrossMamba block in turn and
/// returns `(violations, cases)`: only the output at the same position may move.
fn cross_source_locality(n: usize, variant: Discretization, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let dims = MambaDims { d_model: 6, d_inner: 12, state_dim: 4, dt_rank: 2, conv_width: 4 };
    let mut ps = ParamSet64::new();
    let p = MambaBlockParams::init(&mut ps, "cross", dims, 5, rng).expect("positive sizes");
    spread_step_sizes(&mut ps, rng);
    let target = uniform(rng, &[1, n, 6], -1.0, 1.0);
    let source = uniform(rng, &[1, n, 5], -1.0, 1.0);
    let base = run_cross(&ps, &p, &target, &source, variant);
    let (mut violations, mut cases) = (0, 0);
    for j in 0..n {
        let mut moved_src = source.clone();
        for v in &mut moved_src.data_mut()[j * 5..(j + 1) * 5] {
            *v += rng.gen_range(0.1..1.0);
        }
        let moved = run_cross(&ps, &p, &target, &moved_src, variant);
        for i in 0..n {
            cases += 1;
            if (base.row(i) == moved.row(i)) == (i == j) {
                violations += 1;
            }
        }
    }
    (violations, cases)
}

/// Agent `i`'s teacher-forced logits must ignore actions `j >= i` exactly
/// and react to every action `j < i`; alongside each model, a CrossMamba
/// block of the same length must route source token `j` to output `j` only.
pub fn decoder_causality(models: usize, seed: u64) -> CheckResult {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut violations, mut cases) = (0usize, 0usize);
    for (idx, m) in small_models(models, seed).into_iter().enumerate() {
        let n = m.config().n_agents;
        let variant = if idx % 2 == 0 { Discretization::Euler } else { Discretization::Zoh };
        let (v, c) = cross_source_locality(n, variant, &mut rng);
        violations += v;
        cases += c;
        let (repr, _) = m.encode_array(&uniform(&mut rng, &[n, 6], -1.0, 1.0)).expect("valid obs");
        let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let base = teacher_forced(m.as_ref(), &repr, &actions).expect("valid actions");
        for j in 0..n {
            let mut a2 = actions.clone();
            a2[j] = (a2[j] + 1 + rng.gen_range(0..3)) % 4;
            let moved = teacher_forced(m.as_ref(), &repr, &a2).expect("valid actions");
            for i in 0..n {
                cases += 1;
                let same = base.row(i) == moved.row(i);
                if same != (i <= j) {
                    violations += 1;
                }
            }
        }
    }
    finish(
        "decoder_causality",
        0.0,
        violations as f64,
        cases,
        format!("{models} models and CrossMamba blocks, n in 2..=8; observed = (output, perturbed input) pairs breaking causality"),
        started,
    )
}

/// Autoregressive decoding against teacher forcing on the decoded actions,
/// and incremental-state decoding against full-prefix recomputation.
pub fn decoding_consistency(max_agents: usize, seed: u64) -> (CheckResult, CheckResult) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tf_worst, mut inc_worst, mut cases) = (0.0f64, 0.0f64, 0);
    for n in 1..=max_agents {
        for kind in [ModelKind::Mam, ModelKind::Attention] {
            let cfg = ModelConfig {
                kind,
                d_model: 8,
                state_dim: 4,
                dt_rank: 4,
                n_heads: 2,
                attn_blocks: 2,
                n_blocks: 2,
                ..ModelConfig::new(n, 6, 4)
            };
            let m = init_model::<f64>(&cfg, seed + n as u64).expect("valid config");
            let (repr, _) = m.encode_array(&uniform(&mut rng, &[n, 6], -1.0, 1.0)).expect("valid obs");
            for mode in [DecodeMode::Greedy, DecodeMode::Sample(rng.gen())] {
                let inc = m.decode_autoregressive(&repr, mode, DecodeStrategy::Incremental).expect("decode");
                let rec = m.decode_autoregressive(&repr, mode, DecodeStrategy::Recompute).expect("decode");
                let tf = teacher_forced(m.as_ref(), &repr, &inc.actions).expect("valid actions");
                tf_worst = tf_worst.max(tf.max_abs_diff(&inc.logits));
                inc_worst = if rec.actions == inc.actions {
                    inc_worst.max(rec.logits.max_abs_diff(&inc.logits))
                } else {
                    f64::INFINITY
                };
                cases += 1;
            }
        }
    }
    let detail = format!("n in 1..={max_agents}, both models, greedy and sampled");
    (
        finish("teacher_forcing_consistency", 1e-6, tf_worst, cases, detail.clone(), started),
        finish("incremental_vs_recompute", 1e-10, inc_worst, cases, detail, started),
    )
}

/// Brute-force evaluation of the truncated discounted sum of TD errors.
fn gae_double_loop(r: &[f64], v: &[f64], boot: &[f64], done: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let (steps, n) = (r.len(), boot.len());
    let value = |t: usize, i: usize| if t < steps { v[t * n + i] } else { boot[i] };
    let mut out = vec![0.0; steps * n];
    for t in 0..steps {
        for i in 0..n {
            let mut weight = 1.0;
            for s in t..steps {
                let live = if done[s] { 0.0 } else { 1.0 };
                out[t * n + i] += weight * (r[s] + gamma * live * value(s + 1, i) - value(s, i));
                if done[s] {
                    break;
                }
                weight *= gamma * lambda;
            }
        }
    }
    out
}

pub fn gae_oracle(draws: usize, seed: u64) -> CheckResult {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let steps = rng.gen_range(1..=64);
        let n = rng.gen_range(1..=6);
        let (gamma, lambda) = (rng.gen_range(0.0..0.999), rng.gen_range(0.0..=1.0));
        let r: Vec<f64> = (0..steps).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..steps * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let boot: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let done: Vec<bool> = (0..steps).map(|_| rng.gen_bool(0.1)).collect();
        let (adv, _) = gae(&r, &v, &boot, &done, gamma, lambda).expect("aligned");
        let oracle = gae_double_loop(&r, &v, &boot, &done, gamma, lambda);
        worst = adv.iter().zip(&oracle).fold(worst, |w, (a, o)| w.max((a - o).abs()));
    }
    finish("gae_oracle", 1e-12, worst, draws, format!("{draws} random trajectories"), started)
}

/// Joint advantage against the sum of sequential local advantages on exact
/// tabular games, every agent order.
pub fn advantage_decomposition(games: usize, seed: u64) -> CheckResult {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut cases) = (0.0f64, 0);
    for g in 0..games {
        let n = 1 + g % 3;
        let k = rng.gen_range(2..=4);
        let states = rng.gen_range(1..=20);
        let game = TabularGame::random(n, k, states, rng.gen_range(0.0..0.99), rng.gen()).expect("within limits");
        let pi = ProductPolicy::random(&game, rng.gen());
        for order in permutations(n) {
            worst = worst.max(advantage_decomposition_check(&game, &pi, &order).expect("valid order"));
            cases += 1;
        }
    }
    finish(
        "advantage_decomposition",
        1e-10,
        worst,
        cases,
        format!("{games} games, n in 1..=3, all agent orders"),
        started,
    )
}

/// Every suite once, at the sizes used by the command-line `verify`.
pub fn run_verify(seed: u64, fault: Fault) -> VerifyReport {
    let (tf, inc) = decoding_consistency(8, seed + 5);
    let checks = vec![
        scan_vs_matrix(50, seed, fault),
        parallel_vs_sequential(100, seed + 1),
        gradient_checks(10, 8, seed + 2),
        encoder_dependence(20, seed + 3),
        decoder_causality(20, seed + 4),
        tf,
        inc,
        gae_oracle(200, seed + 6),
        advantage_decomposition(24, seed + 7),
    ];
    VerifyReport { seed, fault: fault.to_string(), passed: checks.iter().all(|c| c.passed), checks }
}

pub fn report_json(report: &VerifyReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}
