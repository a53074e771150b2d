//! Multi-head scaled dot-product attention and the pre-norm encoder/decoder
//! blocks of the attention baseline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::params::uniform_fan_in;
use crate::numerics::{Array, Bound, ParamId, ParamSet, Var};
use crate::scalar::Scalar;

/// Scale and offset of one layer norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub scale: ParamId,
    pub offset: ParamId,
}

impl NormParams {
    pub fn init<T: Scalar>(ps: &mut ParamSet<T>, prefix: &str, dim: usize) -> Self {
        Self {
            scale: ps.add(format!("{prefix}.scale"), Array::full([dim], T::one())),
            offset: ps.add(format!("{prefix}.offset"), Array::zeros([dim])),
        }
    }

    pub fn apply<T: Scalar>(&self, x: &Var<T>, bound: &Bound<T>) -> Var<T> {
        x.layer_norm(&bound[self.scale], &bound[self.offset])
    }
}

/// Weight and bias of a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseParams {
    pub fn init<T: Scalar>(ps: &mut ParamSet<T>, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: ps.add(format!("{prefix}.weight"), uniform_fan_in(rng, &[d_in, d_out])),
            bias: ps.add(format!("{prefix}.bias"), Array::zeros([d_out])),
        }
    }

    pub fn apply<T: Scalar>(&self, x: &Var<T>, bound: &Bound<T>) -> Var<T> {
        x.linear(&bound[self.weight], Some(&bound[self.bias]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub query: DenseParams,
    pub key: DenseParams,
    pub value: DenseParams,
    pub output: DenseParams,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("model width {d_model} is not divisible into {n_heads} heads")));
        }
        Ok(Self {
            query: DenseParams::init(ps, &format!("{prefix}.query"), d_model, d_model, rng),
            key: DenseParams::init(ps, &format!("{prefix}.key"), d_model, d_model, rng),
            value: DenseParams::init(ps, &format!("{prefix}.value"), d_model, d_model, rng),
            output: DenseParams::init(ps, &format!("{prefix}.output"), d_model, d_model, rng),
            n_heads,
        })
    }
}

/// Softmax attention weights `[B, H, Lq, Lk]` for `q` `[B, Lq, D]` and `k`
/// `[B, Lk, D]`. Masked entries are exactly zero.
pub fn attention_weights<T: Scalar>(q: &Array<T>, k: &Array<T>, n_heads: usize, causal: bool) -> Array<T> {
    let (batch, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let lk = k.shape()[1];
    let dk = d / n_heads;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut probs = vec![T::zero(); batch * n_heads * lq * lk];
    for b in 0..batch {
        for h in 0..n_heads {
            let off = h * dk;
            for i in 0..lq {
                let visible = if causal { i + 1 } else { lk };
                let prow = &mut probs[((b * n_heads + h) * lq + i) * lk..][..lk];
                let qrow = &qd[(b * lq + i) * d + off..][..dk];
                let mut max = T::neg_infinity();
                for j in 0..visible {
                    let krow = &kd[(b * lk + j) * d + off..][..dk];
                    let s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut total = T::zero();
                for p in &mut prow[..visible] {
                    *p = (*p - max).exp();
                    total += *p;
                }
                for p in &mut prow[..visible] {
                    *p /= total;
                }
            }
        }
    }
    Array::from_parts(vec![batch, n_heads, lq, lk], probs)
}

/// `softmax(Q K^T / sqrt(d_k)) V` per head. `q` is `[B, Lq, D]`, `k` and `v`
/// are `[B, Lk, D]`. With `causal`, query `i` sees keys `0..=i`.
pub fn scaled_dot_product<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>, n_heads: usize, causal: bool) -> Var<T> {
    let (qs, ks) = (q.shape().to_vec(), k.shape().to_vec());
    assert_eq!(qs.len(), 3, "attention expects [B, L, D]");
    let (batch, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    assert_eq!(ks, [batch, lk, d], "key shape");
    assert_eq!(v.shape(), ks.as_slice(), "value shape");
    assert!(!causal || lq <= lk, "causal attention needs at least as many keys as queries");
    let dk = d / n_heads;
    let scale = T::one() / T::lit(dk as f64).sqrt();

    let weights = attention_weights(q.value(), k.value(), n_heads, causal);
    let probs = weights.into_vec();
    let mut out = vec![T::zero(); batch * lq * d];
    let vd = v.value().data();
    for b in 0..batch {
        for h in 0..n_heads {
            let off = h * dk;
            for i in 0..lq {
                let visible = if causal { i + 1 } else { lk };
                let prow = &probs[((b * n_heads + h) * lq + i) * lk..][..lk];
                let orow = &mut out[(b * lq + i) * d + off..][..dk];
                for j in 0..visible {
                    let vrow = &vd[(b * lk + j) * d + off..][..dk];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += prow[j] * vv;
                    }
                }
            }
        }
    }

    let (qv, kv, vv) = (q.value().clone(), k.value().clone(), v.value().clone());
    q.tape().custom_op("attention", Array::from_parts(vec![batch, lq, d], out), &[q, k, v], move |g, _| {
        let (g, qd, kd, vd) = (g.data(), qv.data(), kv.data(), vv.data());
        let mut gq = vec![T::zero(); batch * lq * d];
        let mut gk = vec![T::zero(); batch * lk * d];
        let mut gv = vec![T::zero(); batch * lk * d];
        let mut gp = vec![T::zero(); lk];
        for b in 0..batch {
            for h in 0..n_heads {
                let off = h * dk;
                for i in 0..lq {
                    let visible = if causal { i + 1 } else { lk };
                    let prow = &probs[((b * n_heads + h) * lq + i) * lk..][..lk];
                    let grow = &g[(b * lq + i) * d + off..][..dk];
                    let mut dot = T::zero();
                    for j in 0..visible {
                        let vrow = &vd[(b * lk + j) * d + off..][..dk];
                        gp[j] = grow.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                        dot += gp[j] * prow[j];
                        let gvrow = &mut gv[(b * lk + j) * d + off..][..dk];
                        for (gvv, &gg) in gvrow.iter_mut().zip(grow) {
                            *gvv += prow[j] * gg;
                        }
                    }
                    let qrow = &qd[(b * lq + i) * d + off..][..dk];
                    for j in 0..visible {
                        let gs = prow[j] * (gp[j] - dot) * scale;
                        let krow = &kd[(b * lk + j) * d + off..][..dk];
                        let gqrow = &mut gq[(b * lq + i) * d + off..][..dk];
                        for (gqv, &kk) in gqrow.iter_mut().zip(krow) {
                            *gqv += gs * kk;
                        }
                        let gkrow = &mut gk[(b * lk + j) * d + off..][..dk];
                        for (gkv, &qq) in gkrow.iter_mut().zip(qrow) {
                            *gkv += gs * qq;
                        }
                    }
                }
            }
        }
        vec![
            Some(Array::from_parts(vec![batch, lq, d], gq)),
            Some(Array::from_parts(vec![batch, lk, d], gk)),
            Some(Array::from_parts(vec![batch, lk, d], gv)),
        ]
    })
}

/// Projected multi-head attention: queries from `q_src`, keys and values
/// from `kv_src`.
pub fn attention<T: Scalar>(
    q_src: &Var<T>,
    kv_src: &Var<T>,
    p: &AttentionParams,
    bound: &Bound<T>,
    causal: bool,
) -> Var<T> {
    let q = p.query.apply(q_src, bound);
    let k = p.key.apply(kv_src, bound);
    let v = p.value.apply(kv_src, bound);
    p.output.apply(&scaled_dot_product(&q, &k, &v, p.n_heads, causal), bound)
}

/// Two-layer GELU feed-forward, `D -> D -> D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub hidden: DenseParams,
    pub output: DenseParams,
}

impl FeedForwardParams {
    pub fn init<T: Scalar>(ps: &mut ParamSet<T>, prefix: &str, d_model: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: DenseParams::init(ps, &format!("{prefix}.hidden"), d_model, d_model, rng),
            output: DenseParams::init(ps, &format!("{prefix}.output"), d_model, d_model, rng),
        }
    }

    pub fn apply<T: Scalar>(&self, x: &Var<T>, bound: &Bound<T>) -> Var<T> {
        self.output.apply(&self.hidden.apply(x, bound).gelu(), bound)
    }
}

/// `x += SelfAttn(LN(x)); x += FF(LN(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderBlockParams {
    pub attn_norm: NormParams,
    pub attn: AttentionParams,
    pub ff_norm: NormParams,
    pub ff: FeedForwardParams,
}

impl EncoderBlockParams {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: NormParams::init(ps, &format!("{prefix}.attn_norm"), d_model),
            attn: AttentionParams::init(ps, &format!("{prefix}.attn"), d_model, n_heads, rng)?,
            ff_norm: NormParams::init(ps, &format!("{prefix}.ff_norm"), d_model),
            ff: FeedForwardParams::init(ps, &format!("{prefix}.ff"), d_model, rng),
        })
    }

    pub fn apply<T: Scalar>(&self, x: &Var<T>, bound: &Bound<T>) -> Var<T> {
        let z = self.attn_norm.apply(x, bound);
        let x = x.add(&attention(&z, &z, &self.attn, bound, false));
        x.add(&self.ff.apply(&self.ff_norm.apply(&x, bound), bound))
    }
}

/// `y += CausalSelf(LN(y)); y += CausalCross(q = LN(repr), kv = LN(y));
/// y += FF(LN(y))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderBlockParams {
    pub self_norm: NormParams,
    pub self_attn: AttentionParams,
    pub query_norm: NormParams,
    pub cross_norm: NormParams,
    pub cross_attn: AttentionParams,
    pub ff_norm: NormParams,
    pub ff: FeedForwardParams,
}

impl DecoderBlockParams {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            self_norm: NormParams::init(ps, &format!("{prefix}.self_norm"), d_model),
            self_attn: AttentionParams::init(ps, &format!("{prefix}.self_attn"), d_model, n_heads, rng)?,
            query_norm: NormParams::init(ps, &format!("{prefix}.query_norm"), d_model),
            cross_norm: NormParams::init(ps, &format!("{prefix}.cross_norm"), d_model),
            cross_attn: AttentionParams::init(ps, &format!("{prefix}.cross_attn"), d_model, n_heads, rng)?,
            ff_norm: NormParams::init(ps, &format!("{prefix}.ff_norm"), d_model),
            ff: FeedForwardParams::init(ps, &format!("{prefix}.ff"), d_model, rng),
        })
    }

    /// `repr` may be longer than `y`; only its first `y` positions are used.
    pub fn apply<T: Scalar>(&self, y: &Var<T>, repr: &Var<T>, bound: &Bound<T>) -> Var<T> {
        let z = self.self_norm.apply(y, bound);
        let y = y.add(&attention(&z, &z, &self.self_attn, bound, true));
        let len = y.shape()[1];
        let q = self.query_norm.apply(&repr.slice(1, 0, len), bound);
        let kv = self.cross_norm.apply(&y, bound);
        let y = y.add(&attention(&q, &kv, &self.cross_attn, bound, true));
        y.add(&self.ff.apply(&self.ff_norm.apply(&y, bound), bound))
    }
}
