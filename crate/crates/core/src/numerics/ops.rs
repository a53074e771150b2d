//! Forward kernels on plain arrays. The autodiff tape wraps these, and the
//! gradient-free inference paths call them directly so both routes share
//! one arithmetic implementation.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::scalar::Scalar;

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Above this input softplus switches to `x + log1p(exp(-x))`.
pub const SOFTPLUS_STABLE_THRESHOLD: f64 = 20.0;

/// Row count below which the naive matmul loop beats packing for gemm.
const GEMM_MIN_ROWS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Softplus,
    Exp,
    Tanh,
    Gelu,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "silu" => Activation::Silu,
            "softplus" => Activation::Softplus,
            "exp" => Activation::Exp,
            "tanh" => Activation::Tanh,
            "gelu" => Activation::Gelu,
            "sigmoid" => Activation::Sigmoid,
            other => return Err(Error::Config(format!("unknown activation `{other}`"))),
        })
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::lit(SOFTPLUS_STABLE_THRESHOLD) {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => silu(x),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// dy/dx given the input `x` and the output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::Tanh => T::one() - y * y,
            Activation::Gelu => {
                let c = T::lit(GELU_C);
                let k = T::lit(GELU_K);
                let t = (c * (x + k * x * x * x)).tanh();
                let half = T::lit(0.5);
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// Elementwise activation selected by name.
pub fn pointwise<T: Scalar>(name: &str, x: &Array<T>) -> Result<Array<T>> {
    let act: Activation = name.parse()?;
    Ok(x.map(|v| act.apply(v)))
}

/// `c (+)= op(a) @ op(b)` for row-major buffers, `op(a)` being `[m, k]` and
/// `op(b)` being `[k, n]`. A transposed operand is stored in its original
/// (untransposed) layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs size");
    assert_eq!(b.len(), k * n, "gemm rhs size");
    assert_eq!(c.len(), m * n, "gemm out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    if m < GEMM_MIN_ROWS && !a_trans && !b_trans {
        if !accumulate {
            c.fill(T::zero());
        }
        for i in 0..m {
            let out = &mut c[i * n..(i + 1) * n];
            for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// `x @ w (+ bias)` over the last axis; `w` is `[in, out]`.
pub fn linear<T: Scalar>(x: &Array<T>, w: &Array<T>, bias: Option<&Array<T>>) -> Array<T> {
    assert_eq!(w.ndim(), 2, "linear weight must be 2-d");
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.last_dim(), d_in, "linear input dim {:?} vs weight {:?}", x.shape(), w.shape());
    let rows = x.rows();
    let mut out = match bias {
        Some(b) => {
            assert_eq!(b.len(), d_out, "linear bias size");
            let mut v = Vec::with_capacity(rows * d_out);
            for _ in 0..rows {
                v.extend_from_slice(b.data());
            }
            v
        }
        None => vec![T::zero(); rows * d_out],
    };
    gemm(rows, d_in, d_out, x.data(), false, w.data(), false, &mut out, true);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Array::from_parts(shape, out)
}

/// Per-row statistics kept for the layer-norm backward pass.
pub struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm_with_cache<T: Scalar>(
    x: &Array<T>,
    scale: &Array<T>,
    offset: &Array<T>,
) -> (Array<T>, LayerNormCache<T>) {
    let d = x.last_dim();
    assert_eq!(scale.len(), d, "layer_norm scale size");
    assert_eq!(offset.len(), d, "layer_norm offset size");
    let rows = x.rows();
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            normalized[r * d + j] = xh;
            out[r * d + j] = xh * scale.data()[j] + offset.data()[j];
        }
    }
    (Array::from_parts(x.shape().to_vec(), out), LayerNormCache { normalized, inv_std })
}

/// Normalizes every row of the last axis to zero mean and unit variance,
/// then applies `scale` and `offset`.
pub fn layer_norm<T: Scalar>(x: &Array<T>, scale: &Array<T>, offset: &Array<T>) -> Array<T> {
    layer_norm_with_cache(x, scale, offset).0
}

pub fn log_softmax_rows<T: Scalar>(x: &Array<T>) -> Array<T> {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Array::from_parts(x.shape().to_vec(), out)
}

pub fn softmax_rows<T: Scalar>(x: &Array<T>) -> Array<T> {
    log_softmax_rows(x).map(|v| v.exp())
}

/// Reverses the order of entries along `axis`.
pub fn flip<T: Scalar>(x: &Array<T>, axis: usize) -> Array<T> {
    assert!(axis < x.ndim(), "flip axis out of range");
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(x.len());
    for o in 0..outer {
        for i in (0..n).rev() {
            let start = (o * n + i) * inner;
            out.extend_from_slice(&x.data()[start..start + inner]);
        }
    }
    Array::from_parts(shape.to_vec(), out)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn silu_at_zero_is_zero() {
        assert_eq!(silu(0.0f64), 0.0);
    }

    #[test]
    fn softplus_large_input_does_not_overflow() {
        // log1p(exp(50)) = 50 + log1p(exp(-50)); the correction is ~1.9e-22,
        // below f64 resolution at 50, so the reference is 50 exactly.
        let reference = 50.0 + (-50.0f64).exp().ln_1p();
        assert_eq!(softplus(50.0f64), reference);
        assert!((softplus(50.0f64) - 50.0).abs() < 1e-12);
        assert!(softplus(1000.0f64).is_finite());
        assert!(softplus(1000.0f32).is_finite());
        assert!(softplus(-1000.0f64) >= 0.0);
    }

    #[test]
    fn unknown_activation_is_config_error() {
        let x = arr(&[1], &[0.0]);
        assert!(matches!(pointwise("relu6", &x), Err(Error::Config(_))));
        assert!(pointwise("tanh", &x).is_ok());
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for act in [
            Activation::Silu,
            Activation::Softplus,
            Activation::Exp,
            Activation::Tanh,
            Activation::Gelu,
            Activation::Sigmoid,
        ] {
            for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5, 25.0] {
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let an = act.derivative(x, act.apply(x));
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{act:?} at {x}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_offset() {
        let x = arr(&[3], &[1.0, 1.0, 1.0]);
        let y = layer_norm(&x, &arr(&[3], &[1.0; 3]), &arr(&[3], &[0.0; 3]));
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = arr(&[2], &[-1.0, 1.0]);
        let y = layer_norm(&x, &arr(&[2], &[1.0; 2]), &arr(&[2], &[0.0; 2]));
        // var = 1, so y = x / sqrt(1 + eps)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_affine_hand_computed() {
        // mean 2, biased variance 8/3.
        let x = arr(&[3], &[0.0, 2.0, 4.0]);
        let y = layer_norm(&x, &arr(&[3], &[2.0; 3]), &arr(&[3], &[1.0; 3]));
        let rstd = 1.0 / (8.0f64 / 3.0 + 1e-5).sqrt();
        let expect = [2.0 * (-2.0 * rstd) + 1.0, 1.0, 2.0 * (2.0 * rstd) + 1.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn gemm_paths_agree() {
        let (m, k, n) = (11, 5, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut fast = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut fast, false);
        let mut small = vec![0.0; 2 * n];
        gemm(2, k, n, &a[..2 * k], false, &b, false, &mut small, false);
        for i in 0..m * n {
            assert!((naive[i] - fast[i]).abs() < 1e-12);
        }
        for i in 0..2 * n {
            assert!((naive[i] - small[i]).abs() < 1e-12);
        }
        // transposed operands: (a^T)^T @ (b^T)^T
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut tr = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut tr, false);
        for i in 0..m * n {
            assert!((naive[i] - tr[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_reverses_middle_axis() {
        let x = Array::<f64>::from_fn([1, 3, 2], |i| i as f64);
        let y = flip(&x, 1);
        assert_eq!(y.data(), &[4.0, 5.0, 2.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn log_softmax_normalizes() {
        let x = arr(&[2, 3], &[1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]);
        let p = softmax_rows(&x);
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
