//! Define-by-run reverse-mode differentiation over whole-array operations.
//!
//! Every operation on a [`Var`] computes its value eagerly and, when the
//! tape is recording and at least one input needs a gradient, appends a node
//! holding the parent indices and a closure that maps the output gradient to
//! parent gradients. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid topological order because parents always precede
//! their children.
//!
//! A tape built with [`Tape::inference`] records nothing, so the same model
//! code runs as a plain forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::ops::{self, Activation};
use crate::numerics::Array;
use crate::scalar::Scalar;

/// Maps the output gradient to one optional gradient per parent. The mask
/// flags the parents that actually need one.
pub type BackwardFn<T> = Box<dyn Fn(&Array<T>, &[bool]) -> Vec<Option<Array<T>>>>;

struct Node<T> {
    name: &'static str,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

/// Shared handle to a recording (or inert) computation tape.
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self { inner: Rc::clone(&self.inner) }
    }
}

/// A value on a tape. `node` is `None` for constants and for everything
/// computed on an inference tape.
pub struct Var<T> {
    tape: Tape<T>,
    node: Option<usize>,
    value: Array<T>,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self { tape: self.tape.clone(), node: self.node, value: self.value.clone() }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(node={:?}, {:?})", self.node, self.value)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that never records; gradients through it are all zero.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), recording })) }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Array<T>) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let node = if inner.recording {
            inner.nodes.push(Node { name: "param", parents: Vec::new(), backward: None });
            Some(inner.nodes.len() - 1)
        } else {
            None
        };
        Var { tape: self.clone(), node, value }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array<T>) -> Var<T> {
        Var { tape: self.clone(), node: None, value }
    }

    /// Records an operation with a hand-written gradient rule.
    ///
    /// `backward` receives the gradient of the output and a mask of parents
    /// that need gradients; it returns one entry per parent (entries for
    /// masked-out parents are ignored).
    pub fn custom_op(
        &self,
        name: &'static str,
        value: Array<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Array<T>, &[bool]) -> Vec<Option<Array<T>>> + 'static,
    ) -> Var<T> {
        for p in parents {
            debug_assert!(Rc::ptr_eq(&p.tape.inner, &self.inner), "mixed tapes");
        }
        let mut inner = self.inner.borrow_mut();
        let needs_grad = inner.recording && parents.iter().any(|p| p.node.is_some());
        let node = if needs_grad {
            inner.nodes.push(Node {
                name,
                parents: parents.iter().map(|p| p.node).collect(),
                backward: Some(Box::new(backward)),
            });
            Some(inner.nodes.len() - 1)
        } else {
            None
        };
        Var { tape: self.clone(), node, value }
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", loss.value.shape())));
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Array<T>>> = vec![None; inner.nodes.len()];
        let Some(root) = loss.node else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Array::full(loss.value.shape().to_vec(), T::one()));
        for id in (0..=root).rev() {
            let node = &inner.nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            // Interior gradients are consumed; only leaves keep theirs.
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = rule(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.name);
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(p), Some(pg)) = (parent, pg) {
                    accumulate(&mut grads[*p], pg, node.name);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array<T>>, g: Array<T>, op: &str) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch from {op}");
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; zeros when it is not on any path to the loss.
    pub fn get(&self, var: &Var<T>) -> Array<T> {
        var.node
            .and_then(|id| self.grads.get(id).cloned().flatten())
            .unwrap_or_else(|| Array::zeros(var.value.shape().to_vec()))
    }
}

fn sum_rows<T: Scalar>(g: &Array<T>) -> Array<T> {
    let d = g.last_dim();
    let mut out = vec![T::zero(); d];
    for row in g.data().chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Array::from_parts(vec![d], out)
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// Whether gradients flow into this value.
    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<T> {
        self.tape.constant(self.value.clone())
    }

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let value = self.value.zip_map(&other.value, |a, b| a + b);
        self.tape.custom_op("add", value, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let value = self.value.zip_map(&other.value, |a, b| a - b);
        self.tape.custom_op("sub", value, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let value = self.value.zip_map(&other.value, |a, b| a * b);
        let (a, b) = (self.value.clone(), other.value.clone());
        self.tape.custom_op("mul", value, &[self, other], move |g, mask| {
            vec![mask[0].then(|| g.zip_map(&b, |x, y| x * y)), mask[1].then(|| g.zip_map(&a, |x, y| x * y))]
        })
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let value = self.value.map(|v| v * c);
        self.tape.custom_op("scale", value, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        let value = self.value.map(|v| v + c);
        self.tape.custom_op("add_scalar", value, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn square(&self) -> Var<T> {
        self.mul(self)
    }

    pub fn activation(&self, act: Activation) -> Var<T> {
        let value = self.value.map(|v| act.apply(v));
        let x = self.value.clone();
        let y = value.clone();
        self.tape.custom_op("activation", value, &[self], move |g, _| {
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                .collect();
            vec![Some(Array::from_parts(g.shape().to_vec(), d))]
        })
    }

    pub fn silu(&self) -> Var<T> {
        self.activation(Activation::Silu)
    }

    pub fn softplus(&self) -> Var<T> {
        self.activation(Activation::Softplus)
    }

    pub fn exp(&self) -> Var<T> {
        self.activation(Activation::Exp)
    }

    pub fn tanh(&self) -> Var<T> {
        self.activation(Activation::Tanh)
    }

    pub fn gelu(&self) -> Var<T> {
        self.activation(Activation::Gelu)
    }

    /// `self @ weight (+ bias)` over the last axis; `weight` is `[in, out]`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
        let value = ops::linear(&self.value, &weight.value, bias.map(|b| &b.value));
        let x = self.value.clone();
        let w = weight.value.clone();
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.tape.custom_op("linear", value, &parents, move |g, mask| {
            let rows = x.rows();
            let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
            let gx = mask[0].then(|| {
                let mut out = vec![T::zero(); rows * d_in];
                ops::gemm(rows, d_out, d_in, g.data(), false, w.data(), true, &mut out, false);
                Array::from_parts(x.shape().to_vec(), out)
            });
            let gw = mask[1].then(|| {
                let mut out = vec![T::zero(); d_in * d_out];
                ops::gemm(d_in, rows, d_out, x.data(), true, g.data(), false, &mut out, false);
                Array::from_parts(vec![d_in, d_out], out)
            });
            let mut res = vec![gx, gw];
            if mask.len() == 3 {
                res.push(mask[2].then(|| sum_rows(g)));
            }
            res
        })
    }

    /// Layer normalization over the last axis with learned scale and offset.
    pub fn layer_norm(&self, scale: &Var<T>, offset: &Var<T>) -> Var<T> {
        let (value, cache) = ops::layer_norm_with_cache(&self.value, &scale.value, &offset.value);
        let gamma = scale.value.clone();
        self.tape.custom_op("layer_norm", value, &[self, scale, offset], move |g, mask| {
            let d = g.last_dim();
            let inv_d = T::one() / T::lit(d as f64);
            let xh = &cache.normalized;
            let gx = mask[0].then(|| {
                let mut out = vec![T::zero(); g.len()];
                for (r, &rstd) in cache.inv_std.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xr = &xh[r * d..(r + 1) * d];
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gamma.data()[j];
                        mean_g += gh;
                        mean_gx += gh * xr[j];
                    }
                    mean_g *= inv_d;
                    mean_gx *= inv_d;
                    for j in 0..d {
                        let gh = gr[j] * gamma.data()[j];
                        out[r * d + j] = rstd * (gh - mean_g - xr[j] * mean_gx);
                    }
                }
                Array::from_parts(g.shape().to_vec(), out)
            });
            let gs = mask[1].then(|| {
                let mut out = vec![T::zero(); d];
                for (i, &gv) in g.data().iter().enumerate() {
                    out[i % d] += gv * xh[i];
                }
                Array::from_parts(vec![d], out)
            });
            let go = mask[2].then(|| sum_rows(g));
            vec![gx, gs, go]
        })
    }

    pub fn sum(&self) -> Var<T> {
        let value = Array::scalar(self.value.sum());
        let shape = self.shape().to_vec();
        self.tape.custom_op("sum", value, &[self], move |g, _| vec![Some(Array::full(shape.clone(), g.data()[0]))])
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::lit(self.value.len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Sum over the last axis.
    pub fn sum_last(&self) -> Var<T> {
        let d = self.value.last_dim();
        let data: Vec<T> = self.value.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let mut shape = self.shape()[..self.value.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let in_shape = self.shape().to_vec();
        self.tape.custom_op("sum_last", Array::from_parts(shape, data), &[self], move |g, _| {
            let mut out = Vec::with_capacity(g.len() * d);
            for &v in g.data() {
                out.extend(std::iter::repeat_n(v, d));
            }
            vec![Some(Array::from_parts(in_shape.clone(), out))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let value = self.value.reshape(shape.to_vec()).expect("reshape size");
        let in_shape = self.shape().to_vec();
        self.tape.custom_op("reshape", value, &[self], move |g, _| {
            vec![Some(g.reshape(in_shape.clone()).expect("reshape size"))]
        })
    }

    pub fn flip(&self, axis: usize) -> Var<T> {
        let value = ops::flip(&self.value, axis);
        self.tape.custom_op("flip", value, &[self], move |g, _| vec![Some(ops::flip(g, axis))])
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "slice out of range");
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.value.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape.custom_op("slice", Array::from_parts(out_shape, data), &[self], move |g, _| {
            let mut out = vec![T::zero(); shape.iter().product()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(Array::from_parts(shape.clone(), out))]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var<T>], axis: usize) -> Var<T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), first.len(), "concat rank");
                assert_eq!(&s[..axis], &first[..axis], "concat outer dims");
                assert_eq!(&s[axis + 1..], &first[axis + 1..], "concat inner dims");
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                let base = o * l * inner;
                data.extend_from_slice(&p.value.data()[base..base + l * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        parts[0].tape.custom_op("concat", Array::from_parts(shape, data), parts, move |g, mask| {
            let mut out: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut cursor = 0;
            for _ in 0..outer {
                for (buf, &l) in out.iter_mut().zip(&lens) {
                    buf.extend_from_slice(&g.data()[cursor..cursor + l * inner]);
                    cursor += l * inner;
                }
            }
            out.into_iter()
                .zip(&part_shapes)
                .zip(mask)
                .map(|((buf, s), &m)| m.then(|| Array::from_parts(s.clone(), buf)))
                .collect()
        })
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `indices`, shaped
    /// `[lead..., dim]`.
    pub fn embedding(table: &Var<T>, indices: &[usize], lead: &[usize]) -> Result<Var<T>> {
        let (vocab, dim) = (table.shape()[0], table.shape()[1]);
        if lead.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("embedding", format!("{} indices for lead {lead:?}", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!("embedding index {bad} >= vocabulary {vocab}")));
        }
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(table.value.row(i));
        }
        let mut shape = lead.to_vec();
        shape.push(dim);
        let idx = indices.to_vec();
        Ok(table.tape.custom_op("embedding", Array::from_parts(shape, data), &[table], move |g, _| {
            let mut out = vec![T::zero(); vocab * dim];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..dim {
                    out[i * dim + j] += g.data()[r * dim + j];
                }
            }
            vec![Some(Array::from_parts(vec![vocab, dim], out))]
        }))
    }

    pub fn log_softmax_last(&self) -> Var<T> {
        let value = ops::log_softmax_rows(&self.value);
        let y = value.clone();
        self.tape.custom_op("log_softmax", value, &[self], move |g, _| {
            let d = g.last_dim();
            let mut out = g.data().to_vec();
            for (r, row) in out.chunks_mut(d).enumerate() {
                let total: T = row.iter().copied().sum();
                for (j, v) in row.iter_mut().enumerate() {
                    *v -= y.data()[r * d + j].exp() * total;
                }
            }
            vec![Some(Array::from_parts(g.shape().to_vec(), out))]
        })
    }

    /// Picks `indices[r]` from row `r` of the last axis.
    pub fn gather_last(&self, indices: &[usize]) -> Result<Var<T>> {
        let d = self.value.last_dim();
        if indices.len() != self.value.rows() {
            return Err(Error::shape(
                "gather_last",
                format!("{} indices for {} rows", indices.len(), self.value.rows()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d) {
            return Err(Error::Contract(format!("gather index {bad} >= {d}")));
        }
        let data: Vec<T> = indices.iter().enumerate().map(|(r, &i)| self.value.data()[r * d + i]).collect();
        let mut shape = self.shape()[..self.value.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let in_shape = self.shape().to_vec();
        let idx = indices.to_vec();
        Ok(self.tape.custom_op("gather_last", Array::from_parts(shape, data), &[self], move |g, _| {
            let mut out = vec![T::zero(); in_shape.iter().product()];
            for (r, &i) in idx.iter().enumerate() {
                out[r * d + i] = g.data()[r];
            }
            vec![Some(Array::from_parts(in_shape.clone(), out))]
        }))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        let value = self.value.map(|v| v.max(lo).min(hi));
        let x = self.value.clone();
        self.tape.custom_op("clamp", value, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv >= lo && xv <= hi { gv } else { T::zero() }))]
        })
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(&self, other: &Var<T>) -> Var<T> {
        assert_eq!(self.shape(), other.shape(), "minimum shape mismatch");
        let value = self.value.zip_map(&other.value, |a, b| a.min(b));
        let (a, b) = (self.value.clone(), other.value.clone());
        self.tape.custom_op("minimum", value, &[self, other], move |g, _| {
            let left: Vec<T> = g
                .data()
                .iter()
                .zip(a.data().iter().zip(b.data()))
                .map(|(&gv, (&x, &y))| if x <= y { gv } else { T::zero() })
                .collect();
            let right: Vec<T> = g.data().iter().zip(&left).map(|(&gv, &l)| gv - l).collect();
            vec![Some(Array::from_parts(g.shape().to_vec(), left)), Some(Array::from_parts(g.shape().to_vec(), right))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::finite_difference_gradient;
    use crate::numerics::ops::sigmoid;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let tape = Tape::new();
        let x = arr(&[3], &[0.5, -2.0, 3.0]);
        let w = tape.param(arr(&[3], &[1.0, 1.0, 1.0]));
        let loss = w.mul(&tape.constant(x.clone())).sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&w), x);
    }

    #[test]
    fn softplus_gradient_is_sigmoid() {
        let tape = Tape::new();
        let wv = arr(&[4], &[-3.0, 0.0, 1.5, 30.0]);
        let w = tape.param(wv.clone());
        let loss = w.softplus().sum();
        let g = tape.backward(&loss).unwrap().get(&w);
        for (gv, &x) in g.data().iter().zip(wv.data()) {
            assert!((gv - sigmoid(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.param(arr(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(&w), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let tape = Tape::new();
        let a = tape.param(arr(&[2], &[1.0, 2.0]));
        let b = tape.param(arr(&[2, 2], &[1.0; 4]));
        let loss = a.square().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&b), Array::zeros([2, 2]));
        assert_eq!(g.get(&a).data(), &[2.0, 4.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f64>::inference();
        let a = tape.param(arr(&[2], &[1.0, 2.0]));
        let loss = a.exp().sum();
        assert!(tape.is_empty());
        assert!(!loss.tracked());
        assert_eq!(tape.backward(&loss).unwrap().get(&a), Array::zeros([2]));
    }

    /// Random composite exercising every op; compares against finite differences.
    #[test]
    fn composite_gradient_matches_finite_differences() {
        let x0 = Array::<f64>::from_fn([2, 3, 4], |i| ((i * 7 + 3) as f64 * 0.31).sin());
        let w0 = Array::<f64>::from_fn([4, 4], |i| ((i * 5 + 1) as f64 * 0.17).cos() * 0.5);
        let s0 = Array::<f64>::from_fn([4], |i| 1.0 + 0.1 * i as f64);
        let t0 = Array::<f64>::from_fn([5, 4], |i| (i as f64 * 0.23).sin());
        let build = |tape: &Tape<f64>, x: &Array<f64>| -> (Var<f64>, Var<f64>) {
            let xv = tape.param(x.clone());
            let w = tape.constant(w0.clone());
            let s = tape.constant(s0.clone());
            let o = tape.constant(s0.map(|v| v * 0.3));
            let table = tape.constant(t0.clone());
            let h = xv.linear(&w, Some(&o)).gelu().layer_norm(&s, &o);
            let h = h.add(&h.flip(1).silu()).mul(&xv.tanh());
            let e = Var::embedding(&table, &[1, 4, 0, 2, 2, 3], &[2, 3]).unwrap();
            let h = h.sub(&e.softplus());
            let parts = Var::concat(&[&h.slice(1, 0, 2), &h.slice(1, 2, 1).exp()], 1);
            let lp = parts.log_softmax_last();
            let picked = lp.gather_last(&[0, 1, 2, 3, 0, 1]).unwrap();
            let clipped = picked.clamp(-1.5, -0.2).minimum(&picked.scale(0.9));
            let loss = clipped.sum().add(&parts.square().sum_last().mean()).add(&h.reshape(&[24]).mean());
            (xv, loss)
        };
        let tape = Tape::new();
        let (xv, loss) = build(&tape, &x0);
        let ad = tape.backward(&loss).unwrap().get(&xv);
        let fd = finite_difference_gradient(
            |x: &Array<f64>| {
                let t = Tape::inference();
                Ok(build(&t, x).1.value().data()[0])
            },
            &x0,
            1e-6,
        )
        .unwrap();
        for (a, f) in ad.data().iter().zip(fd.data()) {
            assert!((a - f).abs() <= 1e-6 * (1.0 + a.abs()), "ad {a} fd {f}");
        }
    }
}
