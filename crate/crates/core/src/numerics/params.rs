//! Named parameter storage, binding onto a tape, and parameter-level
//! gradient checking.

use std::ops::Index;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Array, Gradients, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named arrays. Order is insertion order and is part
/// of the checkpoint format.
#[derive(Clone, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    arrays: Vec<Array<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), arrays: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.arrays.push(value);
        ParamId(self.arrays.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalars across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.arrays[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    pub fn arrays_mut(&mut self) -> &mut [Array<T>] {
        &mut self.arrays
    }

    /// Replaces every array, keeping names; shapes must match.
    pub fn assign(&mut self, values: Vec<Array<T>>) -> Result<()> {
        if values.len() != self.arrays.len() {
            return Err(Error::Contract(format!(
                "assign: {} arrays for {} parameters",
                values.len(),
                self.arrays.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.arrays[i].shape() {
                return Err(Error::shape(
                    "ParamSet::assign",
                    format!("`{}`: {:?} vs {:?}", self.names[i], v.shape(), self.arrays[i].shape()),
                ));
            }
        }
        self.arrays = values;
        Ok(())
    }

    /// Sets every parameter whose name passes `filter` to zero.
    pub fn zero_where(&mut self, filter: impl Fn(&str) -> bool) {
        for (name, a) in self.names.iter().zip(self.arrays.iter_mut()) {
            if filter(name) {
                *a = Array::zeros(a.shape().to_vec());
            }
        }
    }

    /// Leaves on `tape` for every parameter, in storage order.
    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        Bound { vars: self.arrays.iter().map(|a| tape.param(a.clone())).collect() }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names && self.arrays.iter().zip(&other.arrays).all(|(a, b)| a.bit_eq(b))
    }
}

impl<T: Scalar> std::fmt::Debug for ParamSet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.names.iter().zip(self.arrays.iter().map(|a| a.shape()))).finish()
    }
}

impl<T: Scalar> Index<ParamId> for ParamSet<T> {
    type Output = Array<T>;

    fn index(&self, id: ParamId) -> &Array<T> {
        self.get(id)
    }
}

/// Parameters placed on a tape.
pub struct Bound<T> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn tape(&self) -> Option<&Tape<T>> {
        self.vars.first().map(Var::tape)
    }

    /// Gradient of every parameter, in storage order.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Array<T>> {
        self.vars.iter().map(|v| grads.get(v)).collect()
    }
}

impl<T: Scalar> Index<ParamId> for Bound<T> {
    type Output = Var<T>;

    fn index(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

/// Fan-in scaled uniform initializer: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// where `fan_in` is the leading dimension.
pub fn uniform_fan_in<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Array<T> {
    let bound = 1.0 / (shape[0].max(1) as f64).sqrt();
    uniform(rng, shape, -bound, bound)
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Array<T> {
    Array::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(lo..hi)))
}

/// Denominator floor of the relative error used by gradient checks:
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
}

/// Compares reverse-mode gradients of `loss` against central differences on
/// `samples` parameter coordinates (at least one per array when possible).
pub fn check_param_gradients<T: Scalar>(
    params: &ParamSet<T>,
    loss: impl Fn(&Bound<T>) -> Result<Var<T>>,
    samples: usize,
    h: T,
    seed: u64,
) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let l = loss(&bound)?;
    let grads = bound.gradients(&tape.backward(&l)?);
    drop((l, bound, tape));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(ParamId, usize)> = Vec::with_capacity(samples);
    let mut ids: Vec<ParamId> = params.ids().filter(|&id| !params[id].is_empty()).collect();
    ids.shuffle(&mut rng);
    for &id in ids.iter().take(samples) {
        coords.push((id, rng.gen_range(0..params[id].len())));
    }
    let total = params.num_scalars();
    while coords.len() < samples {
        let mut flat = rng.gen_range(0..total);
        for id in params.ids() {
            let n = params[id].len();
            if flat < n {
                coords.push((id, flat));
                break;
            }
            flat -= n;
        }
    }

    let eval = |p: &ParamSet<T>| -> Result<T> {
        let tape = Tape::inference();
        let bound = p.bind(&tape);
        let v = loss(&bound)?.value().item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "gradient-check loss".into(), index: 0 });
        }
        Ok(v)
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for (id, idx) in coords {
        let orig = probe[id].data()[idx];
        probe.get_mut(id).data_mut()[idx] = orig + h;
        let plus = eval(&probe)?;
        probe.get_mut(id).data_mut()[idx] = orig - h;
        let minus = eval(&probe)?;
        probe.get_mut(id).data_mut()[idx] = orig;
        let numeric = ((plus - minus) / (h + h)).as_f64();
        let analytic = grads[id.index()].data()[idx].as_f64();
        let rel = relative_error(analytic, numeric);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(GradCheckEntry {
                name: params.name(id).to_string(),
                index: idx,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}
