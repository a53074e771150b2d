//! Selective state-space kernel.
//!
//! Shapes, per sequence of length `L` with `E` channels and state size `N`:
//! the state matrix `A` is diagonal per channel (`[E, N]`, strictly
//! negative), `B_t` and `C_t` are `[N]` vectors shared by all channels, the
//! step size `delta_t` is one value per channel (`[E]`), and `D` is a
//! per-channel skip weight. The recurrence is
//!
//! ```text
//! h_t[e, n] = Abar_t[e, n] * h_{t-1}[e, n] + Bbar_t[e, n] * x_t[e],   h_0 = 0
//! y_t[e]    = sum_n C_t[n] * h_t[e, n] + D[e] * x_t[e]
//! ```
//!
//! with `Abar = exp(delta * A)` and `Bbar` given by either zero-order hold or
//! the first-order (Euler) rule `Bbar = delta * B`.

use std::cmp::Ordering;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::{self, softplus};
use crate::numerics::params::uniform_fan_in;
use crate::numerics::{Array, Bound, ParamId, ParamSet, Var};
use crate::scalar::Scalar;

/// Below this `|delta * A|` the zero-order-hold input coefficient is
/// evaluated by its Taylor series instead of `expm1(x) / x`.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Discretization {
    /// Exact zero-order hold for both `A` and `B`.
    Zoh,
    /// Zero-order hold for `A`, first-order `Bbar = delta * B`.
    #[default]
    Euler,
}

impl FromStr for Discretization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zoh" => Ok(Discretization::Zoh),
            "euler" => Ok(Discretization::Euler),
            other => Err(Error::Config(format!("unknown discretization `{other}` (expected zoh or euler)"))),
        }
    }
}

impl std::fmt::Display for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Discretization::Zoh => "zoh",
            Discretization::Euler => "euler",
        })
    }
}

/// `(Abar, phi)` for one diagonal entry, where `Bbar = phi * B`.
#[inline]
pub fn discretize_entry<T: Scalar>(delta: T, a: T, variant: Discretization) -> (T, T) {
    let x = delta * a;
    let a_bar = x.exp();
    let phi = match variant {
        Discretization::Euler => delta,
        Discretization::Zoh => delta * zoh_ratio(x),
    };
    (a_bar, phi)
}

/// `(exp(x) - 1) / x`, continuous at zero.
#[inline]
fn zoh_ratio<T: Scalar>(x: T) -> T {
    if x.abs() < T::lit(ZOH_SERIES_THRESHOLD) {
        T::one() + x * (T::lit(0.5) + x * (T::lit(1.0 / 6.0) + x * T::lit(1.0 / 24.0)))
    } else {
        x.exp_m1() / x
    }
}

/// Partial derivatives of `phi(delta, a)` with respect to `delta` and `a`.
#[inline]
fn phi_partials<T: Scalar>(delta: T, a: T, a_bar: T, variant: Discretization) -> (T, T) {
    match variant {
        Discretization::Euler => (T::one(), T::zero()),
        Discretization::Zoh => {
            let x = delta * a;
            let d_a = if x.abs() < T::lit(ZOH_SERIES_THRESHOLD) {
                delta * delta * (T::lit(0.5) + x * (T::lit(1.0 / 3.0) + x * (T::lit(0.125) + x * T::lit(1.0 / 30.0))))
            } else {
                (x * a_bar - x.exp_m1()) / (a * a)
            };
            (a_bar, d_a)
        }
    }
}

fn check_deltas<T: Scalar>(delta: &[T]) -> Result<()> {
    match delta.iter().find(|&&d| d.partial_cmp(&T::zero()) != Some(Ordering::Greater)) {
        Some(bad) => Err(Error::Domain(format!("step size must be positive, got {bad}"))),
        None => Ok(()),
    }
}

/// Zero-order hold: `Abar = exp(delta A)`, `Bbar = (delta A)^-1 (exp(delta A) - I) delta B`
/// for diagonal `A`, elementwise over equal-length slices.
pub fn discretize_zoh<T: Scalar>(a: &[T], b: &[T], delta: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if a.len() != b.len() || a.len() != delta.len() {
        return Err(Error::shape("discretize_zoh", format!("A {} / B {} / delta {}", a.len(), b.len(), delta.len())));
    }
    check_deltas(delta)?;
    Ok(a.iter()
        .zip(b)
        .zip(delta)
        .map(|((&a, &b), &d)| {
            let (a_bar, phi) = discretize_entry(d, a, Discretization::Zoh);
            (a_bar, phi * b)
        })
        .unzip())
}

/// First-order input discretization `Bbar = delta * B`.
pub fn discretize_euler_b<T: Scalar>(b: &[T], delta: &[T]) -> Result<Vec<T>> {
    if b.len() != delta.len() {
        return Err(Error::shape("discretize_euler_b", format!("B {} / delta {}", b.len(), delta.len())));
    }
    check_deltas(delta)?;
    Ok(b.iter().zip(delta).map(|(&b, &d)| d * b).collect())
}

/// Parameter layout of one selective SSM over `channels` inputs.
///
/// `A` is stored as `a_log = log(-A)`; `C` is read from a sequence with
/// `c_input_dim` features, equal to `channels` except in the cross variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectiveSsmParams {
    pub a_log: ParamId,
    pub d: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub channels: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    pub c_input_dim: usize,
}

/// Range of initial step sizes `softplus(dt_bias)`.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

impl SelectiveSsmParams {
    /// Registers the parameters under `prefix`. `A` starts at
    /// `-A[e, n] = n + 1`, `D` at one, and the step-size bias so that the
    /// initial `delta` is log-uniform in [`DT_INIT_RANGE`].
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        channels: usize,
        state_dim: usize,
        dt_rank: usize,
        c_input_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 || state_dim == 0 || dt_rank == 0 || c_input_dim == 0 {
            return Err(Error::Config(format!(
                "ssm dimensions must be positive (channels {channels}, state {state_dim}, rank {dt_rank}, c input {c_input_dim})"
            )));
        }
        let a_log = Array::from_fn([channels, state_dim], |i| T::lit(((i % state_dim) + 1) as f64).ln());
        let (lo, hi) = DT_INIT_RANGE;
        let dt_bias = Array::from_fn([channels], |_| {
            let dt: f64 = (rng.gen_range(lo.ln()..hi.ln())).exp();
            // inverse softplus
            T::lit(dt + (-(-dt).exp_m1()).ln())
        });
        let up_bound = 1.0 / (dt_rank as f64).sqrt();
        Ok(Self {
            a_log: ps.add(format!("{prefix}.a_log"), a_log),
            d: ps.add(format!("{prefix}.d"), Array::full([channels], T::one())),
            w_b: ps.add(format!("{prefix}.w_b"), uniform_fan_in(rng, &[channels, state_dim])),
            w_c: ps.add(format!("{prefix}.w_c"), uniform_fan_in(rng, &[c_input_dim, state_dim])),
            dt_down: ps.add(format!("{prefix}.dt_down"), uniform_fan_in(rng, &[channels, dt_rank])),
            dt_up: ps.add(
                format!("{prefix}.dt_up"),
                crate::numerics::params::uniform(rng, &[dt_rank, channels], -up_bound, up_bound),
            ),
            dt_bias: ps.add(format!("{prefix}.dt_bias"), dt_bias),
            channels,
            state_dim,
            dt_rank,
            c_input_dim,
        })
    }

    /// `A = -exp(a_log)`.
    pub fn a_matrix<T: Scalar>(&self, ps: &ParamSet<T>) -> Array<T> {
        ps[self.a_log].map(|v| -v.exp())
    }
}

/// Input-dependent SSM parameters for a whole sequence.
#[derive(Clone, Debug)]
pub struct SelectiveInputs<T: Scalar> {
    /// `[L, N]`
    pub b: Array<T>,
    /// `[L, N]`
    pub c: Array<T>,
    /// `[L, E]`, strictly positive.
    pub delta: Array<T>,
}

/// `B_t = W_B x_t`, `C_t = W_C c_t`, `delta_t = softplus(W_up W_down x_t + bias)`
/// for every row of `x` (`[L, E]`). `c_source` (`[L, c_input_dim]`) defaults
/// to `x`.
pub fn selective_parameters<T: Scalar>(
    x: &Array<T>,
    c_source: Option<&Array<T>>,
    params: &SelectiveSsmParams,
    ps: &ParamSet<T>,
) -> Result<SelectiveInputs<T>> {
    if x.last_dim() != params.channels {
        return Err(Error::shape(
            "selective_parameters",
            format!("token dim {} vs {} channels", x.last_dim(), params.channels),
        ));
    }
    let src = c_source.unwrap_or(x);
    if src.last_dim() != params.c_input_dim || src.rows() != x.rows() {
        return Err(Error::shape("selective_parameters", format!("C source {:?} vs x {:?}", src.shape(), x.shape())));
    }
    let b = ops::linear(x, &ps[params.w_b], None);
    let c = ops::linear(src, &ps[params.w_c], None);
    let low = ops::linear(x, &ps[params.dt_down], None);
    let delta = ops::linear(&low, &ps[params.dt_up], Some(&ps[params.dt_bias])).map(softplus);
    Ok(SelectiveInputs { b, c, delta })
}

/// One discretized step of the recurrence.
#[derive(Clone, Debug)]
pub struct ScanStep<T: Scalar> {
    /// `[E, N]`, each entry in (0, 1) for positive steps and negative `A`.
    pub a_bar: Array<T>,
    /// `[E, N]`: `Bbar_t x_t`.
    pub b_bar_x: Array<T>,
    /// `[N]`
    pub c: Array<T>,
}

/// Discretizes every step of a sequence. `x`/`delta` are `[L, E]`, `a` is
/// `[E, N]`, `b`/`c` are `[L, N]`.
pub fn build_scan_steps<T: Scalar>(
    x: &Array<T>,
    delta: &Array<T>,
    a: &Array<T>,
    b: &Array<T>,
    c: &Array<T>,
    variant: Discretization,
) -> Result<Vec<ScanStep<T>>> {
    let (e, n) = (a.shape()[0], a.shape()[1]);
    let l = x.rows();
    if x.shape() != [l, e] || delta.shape() != [l, e] || b.shape() != [l, n] || c.shape() != [l, n] {
        return Err(Error::shape(
            "build_scan_steps",
            format!(
                "x {:?} delta {:?} A {:?} B {:?} C {:?}",
                x.shape(),
                delta.shape(),
                a.shape(),
                b.shape(),
                c.shape()
            ),
        ));
    }
    check_deltas(delta.data())?;
    Ok((0..l)
        .map(|t| {
            let mut a_bar = Vec::with_capacity(e * n);
            let mut b_bar_x = Vec::with_capacity(e * n);
            for ch in 0..e {
                let dt = delta.data()[t * e + ch];
                let xv = x.data()[t * e + ch];
                for s in 0..n {
                    let (ab, phi) = discretize_entry(dt, a.data()[ch * n + s], variant);
                    a_bar.push(ab);
                    b_bar_x.push(phi * b.data()[t * n + s] * xv);
                }
            }
            ScanStep {
                a_bar: Array::from_parts(vec![e, n], a_bar),
                b_bar_x: Array::from_parts(vec![e, n], b_bar_x),
                c: Array::from_parts(vec![n], c.row(t).to_vec()),
            }
        })
        .collect())
}

fn check_scan_args<T: Scalar>(steps: &[ScanStep<T>], x: &Array<T>, d: &Array<T>) -> Result<(usize, usize)> {
    if steps.len() != x.rows() {
        return Err(Error::Contract(format!("scan length mismatch: {} steps for {} inputs", steps.len(), x.rows())));
    }
    let e = x.last_dim();
    if d.len() != e {
        return Err(Error::shape("scan", format!("D has {} entries for {e} channels", d.len())));
    }
    let n = steps.first().map_or(0, |s| s.c.len());
    for s in steps {
        if s.a_bar.shape() != [e, n] || s.b_bar_x.shape() != [e, n] || s.c.len() != n {
            return Err(Error::shape("scan", "inconsistent step shapes"));
        }
    }
    Ok((e, n))
}

fn readout<T: Scalar>(h: &[T], c: &[T], x: &[T], d: &[T], out: &mut Vec<T>) {
    let n = c.len();
    for (ch, (&xv, &dv)) in x.iter().zip(d).enumerate() {
        let mut acc = T::zero();
        for s in 0..n {
            acc += c[s] * h[ch * n + s];
        }
        out.push(acc + dv * xv);
    }
}

/// Left-to-right evaluation of the recurrence with `h_0 = 0`.
pub fn scan_sequential<T: Scalar>(steps: &[ScanStep<T>], x: &Array<T>, d: &Array<T>) -> Result<Array<T>> {
    let (e, n) = check_scan_args(steps, x, d)?;
    let mut h = vec![T::zero(); e * n];
    let mut out = Vec::with_capacity(x.len());
    for (t, step) in steps.iter().enumerate() {
        for ((hv, &a), &bx) in h.iter_mut().zip(step.a_bar.data()).zip(step.b_bar_x.data()) {
            *hv = a * *hv + bx;
        }
        readout(&h, step.c.data(), x.row(t), d.data(), &mut out);
    }
    Ok(Array::from_parts(x.shape().to_vec(), out))
}

/// Composition of two affine maps `h -> a h + b`: `later` applied after
/// `earlier` gives `(a2 a1, a2 b1 + b2)`.
#[inline]
pub fn combine<T: Scalar>(later: (T, T), earlier: (T, T)) -> (T, T) {
    (later.0 * earlier.0, later.0 * earlier.1 + later.1)
}

/// In-place inclusive scan with an associative operator `op(earlier, later)`,
/// by recursive pairwise reduction (balanced tree, fixed shape for a given
/// length).
pub fn inclusive_scan<S: Copy>(items: &mut [S], op: &impl Fn(S, S) -> S) {
    let n = items.len();
    if n <= 1 {
        return;
    }
    let mut pairs: Vec<S> = (0..n / 2).map(|i| op(items[2 * i], items[2 * i + 1])).collect();
    inclusive_scan(&mut pairs, op);
    for (i, &p) in pairs.iter().enumerate() {
        items[2 * i + 1] = p;
    }
    for i in 1..n.div_ceil(2) {
        items[2 * i] = op(pairs[i - 1], items[2 * i]);
    }
}

/// Same result as [`scan_sequential`], computed as an associative scan over
/// the per-step affine maps `(Abar_t, Bbar_t x_t)`.
pub fn scan_parallel<T: Scalar>(steps: &[ScanStep<T>], x: &Array<T>, d: &Array<T>) -> Result<Array<T>> {
    let (e, n) = check_scan_args(steps, x, d)?;
    let l = steps.len();
    let op = |earlier: (T, T), later: (T, T)| combine(later, earlier);
    // states[t][ch * n + s]
    let mut states = vec![T::zero(); l * e * n];
    let mut lane = Vec::with_capacity(l);
    for k in 0..e * n {
        lane.clear();
        lane.extend(steps.iter().map(|s| (s.a_bar.data()[k], s.b_bar_x.data()[k])));
        inclusive_scan(&mut lane, &op);
        for (t, &(_, h)) in lane.iter().enumerate() {
            states[t * e * n + k] = h;
        }
    }
    let mut out = Vec::with_capacity(x.len());
    for (t, step) in steps.iter().enumerate() {
        readout(&states[t * e * n..(t + 1) * e * n], step.c.data(), x.row(t), d.data(), &mut out);
    }
    Ok(Array::from_parts(x.shape().to_vec(), out))
}

/// The lower-triangular matrix `Lambda[e, i, j] = C_i (prod_{k=j+1..i} Abar_k) Bbar_j`
/// (zero for `j > i`) such that `y_i = sum_j Lambda[e, i, j] x_j + D x_i`.
///
/// Products are evaluated explicitly per entry, independently of the
/// recurrence. `delta` is `[L, E]`, `a` is `[E, N]`, `b`/`c` are `[L, N]`.
pub fn implicit_attention_from_parts<T: Scalar>(
    delta: &Array<T>,
    a: &Array<T>,
    b: &Array<T>,
    c: &Array<T>,
    variant: Discretization,
) -> Result<Array<T>> {
    let (e, n) = (a.shape()[0], a.shape()[1]);
    let l = delta.rows();
    if delta.shape() != [l, e] || b.shape() != [l, n] || c.shape() != [l, n] {
        return Err(Error::shape("implicit_attention_matrix", "inconsistent parameter shapes"));
    }
    check_deltas(delta.data())?;
    let mut out = vec![T::zero(); e * l * l];
    for ch in 0..e {
        for i in 0..l {
            for j in 0..=i {
                let mut acc = T::zero();
                for s in 0..n {
                    let a_cs = a.data()[ch * n + s];
                    let mut prod = T::one();
                    for k in (j + 1)..=i {
                        prod *= (delta.data()[k * e + ch] * a_cs).exp();
                    }
                    let (_, phi) = discretize_entry(delta.data()[j * e + ch], a_cs, variant);
                    acc += c.data()[i * n + s] * prod * phi * b.data()[j * n + s];
                }
                out[(ch * l + i) * l + j] = acc;
            }
        }
    }
    Ok(Array::from_parts(vec![e, l, l], out))
}

/// [`implicit_attention_from_parts`] with `B`, `C`, `delta` derived from `x`.
pub fn implicit_attention_matrix<T: Scalar>(
    x: &Array<T>,
    params: &SelectiveSsmParams,
    ps: &ParamSet<T>,
    variant: Discretization,
) -> Result<Array<T>> {
    let sel = selective_parameters(x, None, params, ps)?;
    implicit_attention_from_parts(&sel.delta, &params.a_matrix(ps), &sel.b, &sel.c, variant)
}

/// `y_i[e] = sum_j Lambda[e, i, j] x_j[e] + D[e] x_i[e]`.
pub fn apply_implicit_attention<T: Scalar>(lambda: &Array<T>, x: &Array<T>, d: &Array<T>) -> Result<Array<T>> {
    let (e, l) = (lambda.shape()[0], lambda.shape()[1]);
    if x.shape() != [l, e] || d.len() != e {
        return Err(Error::shape(
            "apply_implicit_attention",
            format!("x {:?} for Lambda {:?}", x.shape(), lambda.shape()),
        ));
    }
    let mut out = vec![T::zero(); l * e];
    for i in 0..l {
        for ch in 0..e {
            let mut acc = T::zero();
            for j in 0..l {
                acc += lambda.data()[(ch * l + i) * l + j] * x.data()[j * e + ch];
            }
            out[i * e + ch] = acc + d.data()[ch] * x.data()[i * e + ch];
        }
    }
    Ok(Array::from_parts(vec![l, e], out))
}

/// Advances the state by one token and returns `y_t`. Shared by the fused
/// batched kernel and by incremental decoding, so both produce identical
/// arithmetic. `h` is `[E, N]`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn scan_token<T: Scalar>(
    h: &mut [T],
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    variant: Discretization,
    y: &mut [T],
) {
    let n = b.len();
    for ch in 0..u.len() {
        let (uv, dt) = (u[ch], delta[ch]);
        let hrow = &mut h[ch * n..(ch + 1) * n];
        let arow = &a[ch * n..(ch + 1) * n];
        let mut acc = T::zero();
        for s in 0..n {
            let (a_bar, phi) = discretize_entry(dt, arow[s], variant);
            let hv = a_bar * hrow[s] + phi * b[s] * uv;
            hrow[s] = hv;
            acc += c[s] * hv;
        }
        y[ch] = acc + d[ch] * uv;
    }
}

/// Batched forward: `u`/`delta` `[B, L, E]`, `b`/`c` `[B, L, N]`. Returns `y`
/// and, when `keep_states`, every state `[B, L, E, N]`.
#[allow(clippy::too_many_arguments)]
fn fused_scan_forward<T: Scalar>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    (batch, len, e, n): (usize, usize, usize, usize),
    variant: Discretization,
    keep_states: bool,
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); batch * len * e];
    let mut states = if keep_states { vec![T::zero(); batch * len * e * n] } else { Vec::new() };
    let mut h = vec![T::zero(); e * n];
    for bi in 0..batch {
        h.fill(T::zero());
        for t in 0..len {
            let row = bi * len + t;
            scan_token(
                &mut h,
                &u[row * e..(row + 1) * e],
                &delta[row * e..(row + 1) * e],
                a,
                &b[row * n..(row + 1) * n],
                &c[row * n..(row + 1) * n],
                d,
                variant,
                &mut y[row * e..(row + 1) * e],
            );
            if keep_states {
                states[row * e * n..(row + 1) * e * n].copy_from_slice(&h);
            }
        }
    }
    (y, states)
}

/// Differentiable selective scan over a batch of sequences.
///
/// `u`, `delta`: `[B, L, E]`; `a`: `[E, N]` (negative); `b`, `c`: `[B, L, N]`;
/// `d`: `[E]`. Returns `[B, L, E]`.
pub fn selective_scan<T: Scalar>(
    u: &Var<T>,
    delta: &Var<T>,
    a: &Var<T>,
    b: &Var<T>,
    c: &Var<T>,
    d: &Var<T>,
    variant: Discretization,
) -> Var<T> {
    let us = u.shape();
    assert_eq!(us.len(), 3, "selective_scan expects [B, L, E]");
    let (batch, len, e) = (us[0], us[1], us[2]);
    let n = a.shape()[1];
    assert_eq!(a.shape(), [e, n], "A shape");
    assert_eq!(delta.shape(), us, "delta shape");
    assert_eq!(b.shape(), [batch, len, n], "B shape");
    assert_eq!(c.shape(), [batch, len, n], "C shape");
    assert_eq!(d.shape(), [e], "D shape");
    let dims = (batch, len, e, n);
    let tape = u.tape().clone();
    let keep = tape.is_recording();
    let (y, states) = fused_scan_forward(
        u.value().data(),
        delta.value().data(),
        a.value().data(),
        b.value().data(),
        c.value().data(),
        d.value().data(),
        dims,
        variant,
        keep,
    );
    let (uv, dv, av, bv, cv, dd) = (
        u.value().clone(),
        delta.value().clone(),
        a.value().clone(),
        b.value().clone(),
        c.value().clone(),
        d.value().clone(),
    );
    tape.custom_op("selective_scan", Array::from_parts(vec![batch, len, e], y), &[u, delta, a, b, c, d], move |g, _| {
        let (u, delta, a, b, c, d) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data(), dd.data());
        let g = g.data();
        let mut gu = vec![T::zero(); batch * len * e];
        let mut gdelta = vec![T::zero(); batch * len * e];
        let mut ga = vec![T::zero(); e * n];
        let mut gb = vec![T::zero(); batch * len * n];
        let mut gc = vec![T::zero(); batch * len * n];
        let mut gd = vec![T::zero(); e];
        // carry[ch, s] holds dL/dh_{t+1} * Abar_{t+1}
        let mut carry = vec![T::zero(); e * n];
        for bi in 0..batch {
            carry.fill(T::zero());
            for t in (0..len).rev() {
                let row = bi * len + t;
                let h_t = &states[row * e * n..(row + 1) * e * n];
                let h_prev = (t > 0).then(|| &states[(row - 1) * e * n..row * e * n]);
                let brow = &b[row * n..(row + 1) * n];
                let crow = &c[row * n..(row + 1) * n];
                for ch in 0..e {
                    let gy = g[row * e + ch];
                    let uval = u[row * e + ch];
                    let dt = delta[row * e + ch];
                    gd[ch] += gy * uval;
                    let mut gu_acc = gy * d[ch];
                    let mut gdt_acc = T::zero();
                    for s in 0..n {
                        let k = ch * n + s;
                        gc[row * n + s] += gy * h_t[k];
                        let gh = gy * crow[s] + carry[k];
                        let a_cs = a[k];
                        let (a_bar, phi) = discretize_entry(dt, a_cs, variant);
                        let hp = h_prev.map_or(T::zero(), |hp| hp[k]);
                        // through Abar = exp(delta a)
                        let g_abar = gh * hp * a_bar;
                        gdt_acc += g_abar * a_cs;
                        ga[k] += g_abar * dt;
                        // through phi(delta, a) * b * u
                        let g_phi = gh * brow[s] * uval;
                        let (dphi_dt, dphi_da) = phi_partials(dt, a_cs, a_bar, variant);
                        gdt_acc += g_phi * dphi_dt;
                        ga[k] += g_phi * dphi_da;
                        gb[row * n + s] += gh * phi * uval;
                        gu_acc += gh * phi * brow[s];
                        carry[k] = gh * a_bar;
                    }
                    gu[row * e + ch] += gu_acc;
                    gdelta[row * e + ch] += gdt_acc;
                }
            }
        }
        vec![
            Some(Array::from_parts(vec![batch, len, e], gu)),
            Some(Array::from_parts(vec![batch, len, e], gdelta)),
            Some(Array::from_parts(vec![e, n], ga)),
            Some(Array::from_parts(vec![batch, len, n], gb)),
            Some(Array::from_parts(vec![batch, len, n], gc)),
            Some(Array::from_parts(vec![e], gd)),
        ]
    })
}

/// Tape version of [`selective_parameters`] on `[B, L, E]` inputs; returns
/// `(B, C, delta)`.
pub fn selective_parameters_var<T: Scalar>(
    x: &Var<T>,
    c_source: &Var<T>,
    params: &SelectiveSsmParams,
    bound: &Bound<T>,
) -> (Var<T>, Var<T>, Var<T>) {
    let b = x.linear(&bound[params.w_b], None);
    let c = c_source.linear(&bound[params.w_c], None);
    let delta =
        x.linear(&bound[params.dt_down], None).linear(&bound[params.dt_up], Some(&bound[params.dt_bias])).softplus();
    (b, c, delta)
}

/// Selective SSM on the tape: parameters from `x` (and `C` from `c_source`),
/// then the fused scan. `x`: `[B, L, E]`.
pub fn selective_ssm<T: Scalar>(
    x: &Var<T>,
    c_source: &Var<T>,
    params: &SelectiveSsmParams,
    bound: &Bound<T>,
    variant: Discretization,
) -> Var<T> {
    let (b, c, delta) = selective_parameters_var(x, c_source, params, bound);
    let a = bound[params.a_log].exp().neg();
    selective_scan(x, &delta, &a, &b, &c, &bound[params.d], variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn zoh_closed_form_scalar() {
        let (a_bar, b_bar) = discretize_zoh(&[-1.0f64], &[1.0], &[std::f64::consts::LN_2]).unwrap();
        assert!((a_bar[0] - 0.5).abs() < 1e-15);
        assert!((b_bar[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_small_a_limit_is_delta_b() {
        let (_, b_bar) = discretize_zoh(&[-1e-12f64], &[3.0], &[0.25]).unwrap();
        assert!((b_bar[0] - 0.75).abs() < 1e-12);
        // the series branch agrees with the closed form just under the threshold
        for x in [-0.99e-4f64, 0.5e-4, -1e-6] {
            let series = discretize_entry(1.0f64, x, Discretization::Zoh).1;
            assert!((series - x.exp_m1() / x).abs() < 1e-15, "x = {x}");
        }
    }

    #[test]
    fn zoh_rejects_non_positive_delta() {
        assert!(matches!(discretize_zoh(&[-1.0f64], &[1.0], &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(discretize_euler_b(&[1.0f64], &[-0.1]), Err(Error::Domain(_))));
    }

    #[test]
    fn zoh_matches_scalar_exponential_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..-0.1)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..1.0)).collect();
        let (a_bar, b_bar) = discretize_zoh(&a, &b, &d).unwrap();
        for i in 0..16 {
            let e = (d[i] * a[i]).exp();
            assert!((a_bar[i] - e).abs() < 1e-15);
            // (dA)^-1 (e^{dA} - 1) dB, literally
            let oracle = (e - 1.0) / (d[i] * a[i]) * d[i] * b[i];
            assert!((b_bar[i] - oracle).abs() < 1e-13, "{} vs {oracle}", b_bar[i]);
        }
    }

    #[test]
    fn euler_b_is_delta_times_b() {
        assert_eq!(discretize_euler_b(&[2.0f64], &[0.1]).unwrap(), vec![0.2f64]);
        assert_eq!(discretize_euler_b(&[-1.7f64], &[1.0]).unwrap(), vec![-1.7]);
    }

    #[test]
    fn euler_agrees_with_zoh_to_first_order() {
        let (a, b) = (-1.3f64, 0.8f64);
        let err = |dt: f64| {
            let (_, zoh) = discretize_zoh(&[a], &[b], &[dt]).unwrap();
            (discretize_euler_b(&[b], &[dt]).unwrap()[0] - zoh[0]).abs()
        };
        // error ~ a b dt^2 / 2, so shrinking dt by 10 shrinks it by ~100
        let ratio = err(1e-2) / err(1e-3);
        assert!((ratio - 100.0).abs() < 2.0, "ratio {ratio}");
        assert!((err(1e-3) - (a * b).abs() * 1e-6 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn vanishing_step_limit() {
        for variant in [Discretization::Zoh, Discretization::Euler] {
            let (a_bar, phi) = discretize_entry(1e-8f64, -2.5, variant);
            assert!((a_bar - 1.0).abs() <= 1e-7);
            assert!((phi * 1.5).abs() <= 1e-7);
        }
    }

    #[test]
    fn hand_unrolled_recurrence() {
        let steps: Vec<ScanStep<f64>> = (0..3)
            .map(|_| ScanStep { a_bar: arr(&[1, 1], &[0.5]), b_bar_x: arr(&[1, 1], &[1.0]), c: arr(&[1], &[1.0]) })
            .collect();
        let x = arr(&[3, 1], &[1.0, 1.0, 1.0]);
        let y0 = scan_sequential(&steps, &x, &arr(&[1], &[0.0])).unwrap();
        assert_eq!(y0.data(), &[1.0, 1.5, 1.75]);
        let y1 = scan_sequential(&steps, &x, &arr(&[1], &[1.0])).unwrap();
        assert_eq!(y1.data(), &[2.0, 2.5, 2.75]);
        let yp = scan_parallel(&steps, &x, &arr(&[1], &[1.0])).unwrap();
        assert_eq!(yp.data(), &[2.0, 2.5, 2.75]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Array::<f64>::zeros([5, 2]);
        let delta = Array::<f64>::full([5, 2], 0.3);
        let a = arr(&[2, 2], &[-1.0, -2.0, -0.5, -3.0]);
        let b = Array::<f64>::full([5, 2], 0.7);
        let steps = build_scan_steps(&x, &delta, &a, &b, &b, Discretization::Euler).unwrap();
        let y = scan_sequential(&steps, &x, &arr(&[2], &[1.0, 1.0])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_mismatch_is_contract_violation() {
        let steps = vec![ScanStep { a_bar: arr(&[1, 1], &[0.5]), b_bar_x: arr(&[1, 1], &[1.0]), c: arr(&[1], &[1.0]) }];
        let x = arr(&[2, 1], &[1.0, 1.0]);
        assert!(matches!(scan_sequential(&steps, &x, &arr(&[1], &[0.0])), Err(Error::Contract(_))));
        assert!(matches!(scan_parallel(&steps, &x, &arr(&[1], &[0.0])), Err(Error::Contract(_))));
    }

    #[test]
    fn two_step_implicit_matrix_by_hand() {
        // Abar_2 = 0.5 (delta = ln 2, A = -1), Bbar = 1, C = 1 under Euler with delta*B = 1.
        let ln2 = std::f64::consts::LN_2;
        let delta = arr(&[2, 1], &[ln2, ln2]);
        let a = arr(&[1, 1], &[-1.0]);
        let b = arr(&[2, 1], &[1.0 / ln2, 1.0 / ln2]);
        let c = arr(&[2, 1], &[1.0, 1.0]);
        let m = implicit_attention_from_parts(&delta, &a, &b, &c, Discretization::Euler).unwrap();
        let expect = [1.0, 0.0, 0.5, 1.0];
        for (v, e) in m.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15, "{v} vs {e}");
        }
    }

    #[test]
    fn selective_parameters_zero_input() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SelectiveSsmParams::init(&mut ps, "ssm", 3, 2, 1, 3, &mut rng).unwrap();
        *ps.get_mut(p.dt_bias) = Array::zeros([3]);
        let sel = selective_parameters(&Array::zeros([1, 3]), None, &p, &ps).unwrap();
        assert!(sel.b.data().iter().all(|&v| v == 0.0));
        assert!(sel.c.data().iter().all(|&v| v == 0.0));
        for &d in sel.delta.data() {
            assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_one_delta_projection() {
        // With r = 1 the pre-activation map W_down W_up is an outer product.
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SelectiveSsmParams::init(&mut ps, "ssm", 4, 2, 1, 4, &mut rng).unwrap();
        let (down, up) = (&ps[p.dt_down], &ps[p.dt_up]);
        assert_eq!(down.shape(), [4, 1]);
        assert_eq!(up.shape(), [1, 4]);
        let m: Vec<f64> = (0..16).map(|i| down.data()[i / 4] * up.data()[i % 4]).collect();
        // every 2x2 minor vanishes
        for (r1, r2, c1, c2) in [(0, 1, 0, 1), (1, 3, 0, 2), (0, 2, 1, 3)] {
            let det = m[r1 * 4 + c1] * m[r2 * 4 + c2] - m[r1 * 4 + c2] * m[r2 * 4 + c1];
            assert!(det.abs() < 1e-15);
        }
    }

    #[test]
    fn init_keeps_a_bar_inside_unit_interval() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SelectiveSsmParams::init(&mut ps, "ssm", 6, 5, 2, 6, &mut rng).unwrap();
        let a = p.a_matrix(&ps);
        for s in 0..5 {
            assert!((a.data()[s] + (s + 1) as f64).abs() < 1e-12);
        }
        for &bias in ps[p.dt_bias].data() {
            let dt = softplus(bias);
            assert!((DT_INIT_RANGE.0 * 0.999..=DT_INIT_RANGE.1 * 1.001).contains(&dt));
            for &av in a.data() {
                let ab = (dt * av).exp();
                assert!(ab > 0.0 && ab < 1.0);
            }
        }
    }

    #[test]
    fn fused_scan_matches_step_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (l, e, n) = (6, 3, 2);
        let r = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| -> Array<f64> {
            Array::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
        };
        let u = r(&mut rng, &[l, e], -1.0, 1.0);
        let delta = r(&mut rng, &[l, e], 0.05, 1.0);
        let a = r(&mut rng, &[e, n], -2.0, -0.2);
        let b = r(&mut rng, &[l, n], -1.0, 1.0);
        let c = r(&mut rng, &[l, n], -1.0, 1.0);
        let d = r(&mut rng, &[e], -1.0, 1.0);
        for variant in [Discretization::Euler, Discretization::Zoh] {
            let tape = Tape::inference();
            let reshape = |x: &Array<f64>| tape.constant(x.reshape([1, x.shape()[0], x.shape()[1]]).unwrap());
            let y = selective_scan(
                &reshape(&u),
                &reshape(&delta),
                &tape.constant(a.clone()),
                &reshape(&b),
                &reshape(&c),
                &tape.constant(d.clone()),
                variant,
            );
            let steps = build_scan_steps(&u, &delta, &a, &b, &c, variant).unwrap();
            let y_ref = scan_sequential(&steps, &u, &d).unwrap();
            assert!(y.value().reshape([l, e]).unwrap().max_abs_diff(&y_ref) < 1e-14);
        }
    }

    #[test]
    fn fused_scan_gradients_match_finite_differences() {
        use crate::numerics::params::check_param_gradients;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (bsz, l, e, n) = (2, 5, 3, 2);
        let mut ps = ParamSet::<f64>::new();
        let u = ps.add("u", Array::from_fn([bsz, l, e], |_| rng.gen_range(-1.0..1.0)));
        let dl = ps.add("delta_pre", Array::from_fn([bsz, l, e], |_| rng.gen_range(-2.0..1.0)));
        let al = ps.add("a_log", Array::from_fn([e, n], |_| rng.gen_range(-1.0..1.0)));
        let b = ps.add("b", Array::from_fn([bsz, l, n], |_| rng.gen_range(-1.0..1.0)));
        let c = ps.add("c", Array::from_fn([bsz, l, n], |_| rng.gen_range(-1.0..1.0)));
        let d = ps.add("d", Array::from_fn([e], |_| rng.gen_range(-1.0..1.0)));
        let w = Array::<f64>::from_fn([bsz, l, e], |_| rng.gen_range(-1.0..1.0));
        for variant in [Discretization::Euler, Discretization::Zoh] {
            let report = check_param_gradients(
                &ps,
                |bd| {
                    let delta = bd[dl].softplus();
                    let a = bd[al].exp().neg();
                    let y = selective_scan(&bd[u], &delta, &a, &bd[b], &bd[c], &bd[d], variant);
                    Ok(y.mul(&bd[u].tape().constant(w.clone())).sum())
                },
                60,
                1e-5,
                1,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{variant}: {report:?}");
        }
    }
}
