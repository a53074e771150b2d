//! Central finite differences, the independent oracle for every gradient rule.

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::scalar::Scalar;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
///
/// Aborts with [`Error::NonFinite`] naming the coordinate as soon as `f`
/// yields a non-finite value.
pub fn finite_difference_gradient<T: Scalar>(
    f: impl Fn(&Array<T>) -> Result<T>,
    x: &Array<T>,
    h: T,
) -> Result<Array<T>> {
    if h <= T::zero() {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let two_h = h + h;
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { context: "finite-difference objective".into(), index: i });
        }
        grad.push((plus - minus) / two_h);
    }
    Array::new(x.shape().to_vec(), grad)
}
