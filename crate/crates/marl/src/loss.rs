//! Clipped surrogate objective with value and entropy terms.

use mam_core::{Array, Error, Result, Scalar, Var};

/// Coefficients of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossDiagnostics {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Fraction of `(t, i)` entries with `|r - 1| > clip`.
    pub clip_fraction: f64,
    /// Mean of `(r - 1) - ln r`, a non-negative estimate of KL(old || new).
    pub approx_kl: f64,
}

/// Entropy of each row of `logits` over the last axis; shape drops the
/// last axis.
pub fn categorical_entropy<T: Scalar>(logits: &Var<T>) -> Var<T> {
    let logp = logits.log_softmax_last();
    logp.exp().mul(&logp).sum_last().neg()
}

fn ensure_finite<T: Scalar>(name: &str, a: &Array<T>) -> Result<()> {
    a.ensure_finite(&format!("loss input `{name}`"))
}

/// `policy + value_coef * value - entropy_coef * entropy` where
///
/// * `policy = -mean_{t,i} min(r A, clip(r, 1 - eps, 1 + eps) A)`, `r = exp(new - old)`
/// * `value = mean_{t,i} (V - R)^2`
/// * `entropy = mean_{t,i} H`
///
/// All arguments share one shape. Non-finite inputs abort with
/// [`Error::NonFinite`] naming the input.
pub fn mappo_loss<T: Scalar>(
    new_logp: &Var<T>,
    old_logp: &Array<T>,
    advantages: &Array<T>,
    values: &Var<T>,
    returns: &Array<T>,
    entropy: &Var<T>,
    coef: &LossCoefficients,
) -> Result<(Var<T>, LossDiagnostics)> {
    let shape = new_logp.shape();
    for (name, s) in [
        ("old_logp", old_logp.shape()),
        ("advantages", advantages.shape()),
        ("values", values.shape()),
        ("returns", returns.shape()),
        ("entropy", entropy.shape()),
    ] {
        if s != shape {
            return Err(Error::Contract(format!("loss input `{name}` has shape {s:?}, expected {shape:?}")));
        }
    }
    ensure_finite("new_logp", new_logp.value())?;
    ensure_finite("old_logp", old_logp)?;
    ensure_finite("advantages", advantages)?;
    ensure_finite("values", values.value())?;
    ensure_finite("returns", returns)?;
    ensure_finite("entropy", entropy.value())?;

    let tape = new_logp.tape();
    let eps = T::lit(coef.clip);
    let adv = tape.constant(advantages.clone());
    let ratio = new_logp.sub(&tape.constant(old_logp.clone())).exp();
    let unclipped = ratio.mul(&adv);
    let clipped = ratio.clamp(T::one() - eps, T::one() + eps).mul(&adv);
    let policy = unclipped.minimum(&clipped).mean().neg();
    let value = values.sub(&tape.constant(returns.clone())).square().mean();
    let ent = entropy.mean();
    let total = policy.add(&value.scale(T::lit(coef.value))).sub(&ent.scale(T::lit(coef.entropy)));

    let count = ratio.value().len().max(1) as f64;
    let (mut clipped_count, mut kl) = (0usize, 0.0);
    for &r in ratio.value().data() {
        let r = r.as_f64();
        if (r - 1.0).abs() > coef.clip {
            clipped_count += 1;
        }
        kl += (r - 1.0) - r.ln();
    }
    let item = |v: &Var<T>| v.value().data()[0].as_f64();
    let diagnostics = LossDiagnostics {
        total: item(&total),
        policy: item(&policy),
        value: item(&value),
        entropy: item(&ent),
        clip_fraction: clipped_count as f64 / count,
        approx_kl: kl / count,
    };
    if !diagnostics.total.is_finite() {
        return Err(Error::NonFinite { context: "loss value".into(), index: 0 });
    }
    Ok((total, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mam_core::Tape;

    const COEF: LossCoefficients = LossCoefficients { clip: 0.2, value: 0.5, entropy: 0.01 };

    fn arr(v: &[f64]) -> Array<f64> {
        Array::from_f64([v.len()], v).unwrap()
    }

    fn policy_term(new: &[f64], old: &[f64], adv: &[f64]) -> LossDiagnostics {
        let tape = Tape::new();
        let zeros = arr(&vec![0.0; new.len()]);
        let (_, d) = mappo_loss(
            &tape.param(arr(new)),
            &arr(old),
            &arr(adv),
            &tape.constant(zeros.clone()),
            &zeros,
            &tape.constant(zeros.clone()),
            &COEF,
        )
        .unwrap();
        d
    }

    #[test]
    fn unit_ratio_gives_negative_mean_advantage() {
        let d = policy_term(&[-1.0, -0.5, -2.0], &[-1.0, -0.5, -2.0], &[1.0, -2.0, 4.0]);
        assert!((d.policy + 1.0).abs() < 1e-15);
        assert_eq!(d.clip_fraction, 0.0);
        assert_eq!(d.approx_kl, 0.0);
    }

    #[test]
    fn clipping_caps_positive_advantage() {
        let d = policy_term(&[1.5f64.ln()], &[0.0], &[1.0]);
        assert!((d.policy + 1.2).abs() < 1e-12);
        assert_eq!(d.clip_fraction, 1.0);
    }

    #[test]
    fn clipping_keeps_pessimistic_negative_advantage() {
        let d = policy_term(&[0.5f64.ln()], &[0.0], &[-1.0]);
        assert!((d.policy - 0.8).abs() < 1e-12);
    }

    #[test]
    fn unit_ratio_gradient_is_the_policy_gradient() {
        let tape = Tape::new();
        let adv = [0.5, -1.5, 2.0, 0.25];
        let new = tape.param(arr(&[-0.3, -1.2, -0.7, -2.0]));
        let zeros = arr(&[0.0; 4]);
        let (loss, _) = mappo_loss(
            &new,
            new.value(),
            &arr(&adv),
            &tape.constant(zeros.clone()),
            &zeros,
            &tape.constant(zeros.clone()),
            &COEF,
        )
        .unwrap();
        let g = tape.backward(&loss).unwrap().get(&new);
        for (gv, a) in g.data().iter().zip(adv) {
            assert!((gv + a / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn value_and_entropy_terms_combine() {
        let tape = Tape::new();
        let z = arr(&[0.0, 0.0]);
        let (_, d) = mappo_loss(
            &tape.param(z.clone()),
            &z,
            &z,
            &tape.constant(arr(&[1.0, 3.0])),
            &arr(&[0.0, 1.0]),
            &tape.constant(arr(&[0.5, 1.5])),
            &COEF,
        )
        .unwrap();
        assert!((d.value - 2.5).abs() < 1e-15);
        assert!((d.entropy - 1.0).abs() < 1e-15);
        assert!((d.total - (0.5 * 2.5 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn nan_input_is_reported() {
        let tape = Tape::new();
        let z = arr(&[0.0, 0.0]);
        let err = mappo_loss(
            &tape.param(z.clone()),
            &z,
            &arr(&[0.0, f64::NAN]),
            &tape.constant(z.clone()),
            &z,
            &tape.constant(z.clone()),
            &COEF,
        )
        .unwrap_err();
        assert_eq!(err, Error::NonFinite { context: "loss input `advantages`".into(), index: 1 });
    }

    #[test]
    fn entropy_of_uniform_logits_is_log_k() {
        let tape = Tape::<f64>::new();
        let h = categorical_entropy(&tape.constant(Array::zeros([2, 4])));
        for &v in h.value().data() {
            assert!((v - 4f64.ln()).abs() < 1e-15);
        }
    }
}
