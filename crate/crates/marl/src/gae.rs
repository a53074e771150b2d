//! Generalized advantage estimation with a shared team reward.

use mam_core::{Error, Result};

/// Per-agent advantages and returns for a trajectory of `T` steps.
///
/// `rewards` and `dones` are `[T]`, `values` is `[T * n]` (step-major) and
/// `bootstrap` is `[n]`, the value estimate after the last step. A done flag
/// at step `t` cuts both the bootstrap and the recursion at `t`:
///
/// ```text
/// delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
/// A_t     = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}
/// ```
///
/// Returns `(advantages, returns)`, both `[T * n]`, with `returns = A + V`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let steps = rewards.len();
    let n = bootstrap.len();
    if dones.len() != steps || values.len() != steps * n {
        return Err(Error::Contract(format!(
            "gae: {steps} rewards, {} dones, {} values for {n} agents",
            dones.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; steps * n];
    let mut next_adv = vec![0.0; n];
    for t in (0..steps).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        for i in 0..n {
            let next_value = if t + 1 < steps { values[(t + 1) * n + i] } else { bootstrap[i] };
            let delta = rewards[t] + gamma * next_value * live - values[t * n + i];
            let a = delta + gamma * lambda * live * next_adv[i];
            adv[t * n + i] = a;
            next_adv[i] = a;
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}
