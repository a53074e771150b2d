//! CSV outputs. Each row begins with the schema version of its file kind;
//! columns and their order are fixed per version.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const BENCH_SCHEMA_VERSION: u32 = 1;

/// Columns whose values depend on the machine rather than the seed.
pub const TIMING_COLUMNS: &[&str] = &["wall_clock_s"];

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub update: usize,
    pub env_steps: usize,
    pub eval_return_mean: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub eval_return_ci95: f64,
    pub eval_episodes: usize,
    /// Mean return of episodes finished in the last rollout; NaN when none did.
    pub rollout_return: f64,
    pub loss_total: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub schema_version: u32,
    pub model: String,
    pub n_agents: usize,
    /// Median over repetitions of the mean seconds per joint decode.
    pub seconds_per_step: f64,
    /// Standard deviation of the per-repetition means.
    pub std_seconds: f64,
    pub repetitions: usize,
    /// Decodes averaged inside each repetition.
    pub inner: usize,
}

/// Mean and 95% half-width of `xs`.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

/// File contents with the timing columns blanked, for reproducibility checks.
pub fn strip_timing(csv_text: &str) -> Result<String> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = r.headers()?.clone();
    let drop: Vec<bool> = headers.iter().map(|h| TIMING_COLUMNS.contains(&h)).collect();
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(&headers)?;
    for rec in r.records() {
        let rec = rec?;
        w.write_record(rec.iter().zip(&drop).map(|(v, &d)| if d { "" } else { v }))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::io("<memory>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_of_constant_sample_is_zero() {
        assert_eq!(mean_ci95(&[2.0; 5]), (2.0, 0.0));
        let (m, h) = mean_ci95(&[0.0, 2.0]);
        assert_eq!(m, 1.0);
        assert!((h - 1.96 * (2.0f64 / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn timing_column_is_blanked() {
        let text = "schema_version,update,wall_clock_s\n1,0,0.25\n1,5,1.5\n";
        assert_eq!(strip_timing(text).unwrap(), "schema_version,update,wall_clock_s\n1,0,\n1,5,\n");
    }
}
