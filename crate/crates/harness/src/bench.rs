//! Wall-clock scaling of joint-action decoding with the number of agents.

use std::hint::black_box;
use std::time::Instant;

use mam_core::{init_model, Array32, DecodeMode, JointPolicy, ModelConfig, ModelKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::{BenchRow, BENCH_SCHEMA_VERSION};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln(seconds)` against `ln(n)` per model.
    pub slopes: Vec<(ModelKind, f64)>,
}

impl BenchReport {
    pub fn slope(&self, kind: ModelKind) -> Option<f64> {
        self.slopes.iter().find(|(k, _)| *k == kind).map(|s| s.1)
    }
}

/// Slope of the least-squares line through `(x, y)`.
pub fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Seconds per call of `f` averaged over `inner` calls.
fn time_mean(inner: usize, f: &mut impl FnMut()) -> f64 {
    let start = Instant::now();
    for _ in 0..inner {
        f();
    }
    start.elapsed().as_secs_f64() / inner as f64
}

/// Times one full joint decode (encode plus autoregressive decode) of an
/// untrained single-precision model for every configured agent count.
///
/// Each repetition averages enough decodes to last `min_sample_secs`; the
/// reported value is the median of the repetition means.
pub fn run_bench(cfg: &RunConfig, seed: u64) -> Result<BenchReport> {
    let b = &cfg.bench;
    let mut rows = vec![];
    let mut slopes = vec![];
    for &kind in &b.models {
        let mut points = vec![];
        for &n in &b.agents {
            let model_cfg =
                ModelConfig { kind, n_agents: n, obs_dim: b.obs_dim, n_actions: b.actions, ..cfg.model.clone() };
            let policy: Box<dyn JointPolicy<f32>> = init_model(&model_cfg, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
            let obs = Array32::from_fn([n, b.obs_dim], |_| rng.gen_range(-1.0..1.0));
            let mut decode = || {
                black_box(policy.act(black_box(&obs), DecodeMode::Greedy).expect("bench model is consistent"));
            };
            for _ in 0..b.warmup {
                decode();
            }
            let single = time_mean(1, &mut decode).max(1e-9);
            let inner = ((b.min_sample_secs / single).ceil() as usize).max(1);
            let mut means: Vec<f64> = (0..b.repetitions).map(|_| time_mean(inner, &mut decode)).collect();
            let spread = std_dev(&means);
            let med = median(&mut means);
            points.push(((n as f64).ln(), med.ln()));
            rows.push(BenchRow {
                schema_version: BENCH_SCHEMA_VERSION,
                model: kind.to_string(),
                n_agents: n,
                seconds_per_step: med,
                std_seconds: spread,
                repetitions: b.repetitions,
                inner,
            });
        }
        let slope = if points.len() >= 2 { fit_slope(&points) } else { f64::NAN };
        slopes.push((kind, slope));
    }
    Ok(BenchReport { rows, slopes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [8.0f64, 16.0, 32.0].iter().map(|&n| (n.ln(), (3.0 * n * n).ln())).collect();
        assert!((fit_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
