//! Mamba blocks: the gated SSM module, the residual block, its bidirectional
//! variant and the cross variant that reads `C` from a second sequence.
//!
//! Sequences are `[B, L, D]` on the tape. The `*_step` functions advance one
//! token on plain arrays and carry a [`BlockState`], which is how
//! autoregressive decoding runs in linear time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::{self, silu};
use crate::numerics::params::uniform_fan_in;
use crate::numerics::{Array, Bound, ParamId, ParamSet, Var};
use crate::scalar::Scalar;
use crate::ssm::{scan_token, selective_ssm, Discretization, SelectiveSsmParams};

/// Depthwise causal convolution over `[L, E]`:
/// `y_t[e] = bias[e] + sum_k kernel[e, k] * x_{t-k}[e]`, with `x` zero before
/// the start. `kernel[e, 0]` weights the current token.
pub fn causal_conv1d<T: Scalar>(x: &Array<T>, kernel: &Array<T>, bias: &Array<T>) -> Result<Array<T>> {
    let e = x.last_dim();
    if kernel.ndim() != 2 || kernel.shape()[0] != e || bias.shape() != [e] {
        return Err(Error::shape(
            "causal_conv1d",
            format!("x {:?}, kernel {:?}, bias {:?}", x.shape(), kernel.shape(), bias.shape()),
        ));
    }
    let l = x.rows();
    Ok(Array::from_parts(
        x.shape().to_vec(),
        conv_forward(x.data(), kernel.data(), bias.data(), 1, l, e, kernel.shape()[1]),
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(x: &[T], k: &[T], bias: &[T], batch: usize, l: usize, e: usize, w: usize) -> Vec<T> {
    let mut y = vec![T::zero(); batch * l * e];
    for b in 0..batch {
        for t in 0..l {
            let row = (b * l + t) * e;
            for ch in 0..e {
                let mut acc = bias[ch];
                for lag in 0..w.min(t + 1) {
                    acc += k[ch * w + lag] * x[row - lag * e + ch];
                }
                y[row + ch] = acc;
            }
        }
    }
    y
}

/// Tape version of [`causal_conv1d`] on `[B, L, E]`.
pub fn causal_conv1d_var<T: Scalar>(x: &Var<T>, kernel: &Var<T>, bias: &Var<T>) -> Var<T> {
    let s = x.shape();
    assert_eq!(s.len(), 3, "causal_conv1d expects [B, L, E]");
    let (batch, l, e) = (s[0], s[1], s[2]);
    let w = kernel.shape()[1];
    assert_eq!(kernel.shape(), [e, w], "conv kernel shape");
    let y = conv_forward(x.value().data(), kernel.value().data(), bias.value().data(), batch, l, e, w);
    let (xv, kv) = (x.value().clone(), kernel.value().clone());
    x.tape().custom_op("causal_conv1d", Array::from_parts(vec![batch, l, e], y), &[x, kernel, bias], move |g, mask| {
        let (g, xs, ks) = (g.data(), xv.data(), kv.data());
        let mut gx = vec![T::zero(); if mask[0] { g.len() } else { 0 }];
        let mut gk = vec![T::zero(); e * w];
        let mut gb = vec![T::zero(); e];
        for b in 0..batch {
            for t in 0..l {
                let row = (b * l + t) * e;
                for ch in 0..e {
                    let gv = g[row + ch];
                    gb[ch] += gv;
                    for lag in 0..w.min(t + 1) {
                        let src = row - lag * e + ch;
                        gk[ch * w + lag] += gv * xs[src];
                        if mask[0] {
                            gx[src] += gv * ks[ch * w + lag];
                        }
                    }
                }
            }
        }
        vec![
            mask[0].then(|| Array::from_parts(vec![batch, l, e], gx)),
            Some(Array::from_parts(vec![e, w], gk)),
            Some(Array::from_parts(vec![e], gb)),
        ]
    })
}

/// Sizes shared by every Mamba module of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    pub conv_width: usize,
}

/// The gated SSM module `W_out( SSM(silu(conv(W_in z))) * silu(W_gate z) )`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaModuleParams {
    pub in_x: ParamId,
    pub gate: ParamId,
    pub out: ParamId,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SelectiveSsmParams,
    pub dims: MambaDims,
}

impl MambaModuleParams {
    /// `c_input_dim` is the feature size of the sequence `C` is read from:
    /// `d_inner` for the self variant, the source width for the cross variant.
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        dims: MambaDims,
        c_input_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.d_model == 0 || dims.conv_width == 0 {
            return Err(Error::Config(format!("invalid block dimensions {dims:?}")));
        }
        let (d, e, w) = (dims.d_model, dims.d_inner, dims.conv_width);
        let conv_bound = 1.0 / (w as f64).sqrt();
        Ok(Self {
            in_x: ps.add(format!("{prefix}.in_x"), uniform_fan_in(rng, &[d, e])),
            gate: ps.add(format!("{prefix}.gate"), uniform_fan_in(rng, &[d, e])),
            conv_kernel: ps.add(
                format!("{prefix}.conv_kernel"),
                crate::numerics::params::uniform(rng, &[e, w], -conv_bound, conv_bound),
            ),
            conv_bias: ps.add(format!("{prefix}.conv_bias"), Array::zeros([e])),
            ssm: SelectiveSsmParams::init(
                ps,
                &format!("{prefix}.ssm"),
                e,
                dims.state_dim,
                dims.dt_rank,
                c_input_dim,
                rng,
            )?,
            out: ps.add(format!("{prefix}.out"), uniform_fan_in(rng, &[e, d])),
            dims,
        })
    }
}

/// Pre-norm residual wrapper around one module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaBlockParams {
    pub norm_scale: ParamId,
    pub norm_offset: ParamId,
    pub module: MambaModuleParams,
}

impl MambaBlockParams {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        dims: MambaDims,
        c_input_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_scale: ps.add(format!("{prefix}.norm.scale"), Array::full([dims.d_model], T::one())),
            norm_offset: ps.add(format!("{prefix}.norm.offset"), Array::zeros([dims.d_model])),
            module: MambaModuleParams::init(ps, &format!("{prefix}.mamba"), dims, c_input_dim, rng)?,
        })
    }

    /// Self variant: `C` is read from the module's own SSM input.
    pub fn init_self<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        dims: MambaDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::init(ps, prefix, dims, dims.d_inner, rng)
    }
}

/// Intermediate values of one module application.
pub struct ModuleTrace<T: Scalar> {
    /// SSM input `silu(conv(W_in z))`, `[B, L, E]`.
    pub u: Var<T>,
    /// Module output, `[B, L, D]`.
    pub out: Var<T>,
}

/// Applies the module to `z` (`[B, L, D]`). `c_source`, when given, replaces
/// the SSM input as the sequence `C` is projected from.
pub fn mamba_module_trace<T: Scalar>(
    z: &Var<T>,
    c_source: Option<&Var<T>>,
    p: &MambaModuleParams,
    bound: &Bound<T>,
    variant: Discretization,
) -> ModuleTrace<T> {
    let xin = z.linear(&bound[p.in_x], None);
    let u = causal_conv1d_var(&xin, &bound[p.conv_kernel], &bound[p.conv_bias]).silu();
    let gate = z.linear(&bound[p.gate], None).silu();
    let y = selective_ssm(&u, c_source.unwrap_or(&u), &p.ssm, bound, variant);
    let out = y.mul(&gate).linear(&bound[p.out], None);
    ModuleTrace { u, out }
}

pub fn mamba_module<T: Scalar>(z: &Var<T>, p: &MambaModuleParams, bound: &Bound<T>, variant: Discretization) -> Var<T> {
    mamba_module_trace(z, None, p, bound, variant).out
}

fn pre_norm<T: Scalar>(x: &Var<T>, p: &MambaBlockParams, bound: &Bound<T>) -> Var<T> {
    x.layer_norm(&bound[p.norm_scale], &bound[p.norm_offset])
}

/// `x + module(LN(x))`.
pub fn mamba_block<T: Scalar>(x: &Var<T>, p: &MambaBlockParams, bound: &Bound<T>, variant: Discretization) -> Var<T> {
    x.add(&mamba_module(&pre_norm(x, p, bound), &p.module, bound, variant))
}

/// `x + module(z) + flip(module(flip(z)))` with `z = LN(x)` and one shared
/// module, flipping along the sequence axis.
pub fn bimamba_block<T: Scalar>(x: &Var<T>, p: &MambaBlockParams, bound: &Bound<T>, variant: Discretization) -> Var<T> {
    let z = pre_norm(x, p, bound);
    let forward = mamba_module(&z, &p.module, bound, variant);
    let backward = mamba_module(&z.flip(1), &p.module, bound, variant).flip(1);
    x.add(&forward).add(&backward)
}

/// `target + module(LN(target))` with `C_t` projected from `source_t`.
/// `source` is `[B, L, c_input_dim]` and must share the target's length.
pub fn crossmamba_block<T: Scalar>(
    target: &Var<T>,
    source: &Var<T>,
    p: &MambaBlockParams,
    bound: &Bound<T>,
    variant: Discretization,
) -> Result<Var<T>> {
    if source.shape()[..2] != target.shape()[..2] || source.shape()[2] != p.module.ssm.c_input_dim {
        return Err(Error::Contract(format!(
            "cross source {:?} does not align with target {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let z = pre_norm(target, p, bound);
    Ok(target.add(&mamba_module_trace(&z, Some(source), &p.module, bound, variant).out))
}

/// Recurrent state of one block: the last `w - 1` conv inputs (newest first)
/// and the SSM state.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState<T> {
    conv: Vec<T>,
    ssm: Vec<T>,
}

impl<T: Scalar> BlockState<T> {
    pub fn new(dims: &MambaDims) -> Self {
        Self {
            conv: vec![T::zero(); dims.conv_width.saturating_sub(1) * dims.d_inner],
            ssm: vec![T::zero(); dims.d_inner * dims.state_dim],
        }
    }

    pub fn ssm_state(&self) -> &[T] {
        &self.ssm
    }
}

/// One token of `x + module(LN(x))` (or the cross variant when `c_source` is
/// given) on arrays, updating `state`.
pub fn mamba_block_step<T: Scalar>(
    x: &[T],
    c_source: Option<&[T]>,
    p: &MambaBlockParams,
    ps: &ParamSet<T>,
    state: &mut BlockState<T>,
    variant: Discretization,
) -> Vec<T> {
    let m = &p.module;
    let dims = m.dims;
    let (e, w) = (dims.d_inner, dims.conv_width);
    let row = |v: &[T]| Array::from_parts(vec![1, v.len()], v.to_vec());
    let z = ops::layer_norm(&row(x), &ps[p.norm_scale], &ps[p.norm_offset]);
    let xin = ops::linear(&z, &ps[m.in_x], None);
    let gate = ops::linear(&z, &ps[m.gate], None);

    let kernel = ps[m.conv_kernel].data();
    let mut u = ps[m.conv_bias].data().to_vec();
    for ch in 0..e {
        u[ch] += kernel[ch * w] * xin.data()[ch];
        for lag in 1..w {
            u[ch] += kernel[ch * w + lag] * state.conv[(lag - 1) * e + ch];
        }
    }
    if w > 1 {
        state.conv.copy_within(0..(w - 2) * e, e);
        state.conv[..e].copy_from_slice(xin.data());
    }
    for v in &mut u {
        *v = silu(*v);
    }

    let s = &m.ssm;
    let u_arr = row(&u);
    let b = ops::linear(&u_arr, &ps[s.w_b], None);
    let c = match c_source {
        Some(src) => ops::linear(&row(src), &ps[s.w_c], None),
        None => ops::linear(&u_arr, &ps[s.w_c], None),
    };
    let delta =
        ops::linear(&ops::linear(&u_arr, &ps[s.dt_down], None), &ps[s.dt_up], Some(&ps[s.dt_bias])).map(ops::softplus);
    let a = s.a_matrix(ps);
    let mut y = vec![T::zero(); e];
    scan_token(&mut state.ssm, &u, delta.data(), a.data(), b.data(), c.data(), ps[s.d].data(), variant, &mut y);
    for (yv, &g) in y.iter_mut().zip(gate.data()) {
        *yv *= silu(g);
    }
    let out = ops::linear(&row(&y), &ps[m.out], None);
    x.iter().zip(out.data()).map(|(&a, &b)| a + b).collect()
}
