//! Training and evaluation runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mam_core::{init_model, Error as CoreError, ParamSet};
use mam_marl::{evaluate, IterationStats, Trainer};

use crate::checkpoint::{load_policy, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{mean_ci95, write_csv, MetricsRow, METRICS_SCHEMA_VERSION};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub updates: usize,
    /// Greedy return of the untrained policy.
    pub initial_return: f64,
    pub final_return: f64,
    pub optimum: f64,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn row(
    update: usize,
    env_steps: usize,
    returns: &[f64],
    last: Option<&IterationStats>,
    started: Instant,
) -> MetricsRow {
    let (mean, ci) = mean_ci95(returns);
    let s = last.map(|it| it.stats).unwrap_or_default();
    let nan_if_none = |v: f64| if last.is_some() { v } else { f64::NAN };
    MetricsRow {
        schema_version: METRICS_SCHEMA_VERSION,
        update,
        env_steps,
        eval_return_mean: mean,
        eval_return_ci95: ci,
        eval_episodes: returns.len(),
        rollout_return: last.and_then(|it| it.rollout_return).unwrap_or(f64::NAN),
        loss_total: nan_if_none(s.loss.total),
        loss_policy: nan_if_none(s.loss.policy),
        loss_value: nan_if_none(s.loss.value),
        entropy: nan_if_none(s.loss.entropy),
        clip_fraction: nan_if_none(s.loss.clip_fraction),
        approx_kl: nan_if_none(s.loss.approx_kl),
        grad_norm: nan_if_none(s.grad_norm),
        wall_clock_s: started.elapsed().as_secs_f64(),
    }
}

/// Trains `cfg.model` on `cfg.env` from `seed`, evaluating greedily every
/// `train.eval_interval` updates. Writes the resolved config, the metrics CSV
/// and the final checkpoint under `out`.
///
/// A non-finite loss or gradient aborts the run after saving the parameters
/// from before the failing update and a diagnostics file.
pub fn run_train(cfg: &RunConfig, seed: u64, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write(&out.join(CONFIG_FILE), &cfg.to_text())?;

    let started = Instant::now();
    let env = cfg.env.build()?;
    let optimum = env.max_return();
    let policy = init_model::<f64>(&cfg.model, seed)?;
    let mut trainer = Trainer::new(env, policy, cfg.train.clone(), seed)?;
    let target = cfg.stop_fraction.map(|f| f * optimum);

    let initial = trainer.evaluate()?;
    let initial_return = mean_ci95(&initial).0;
    let mut rows = vec![row(0, 0, &initial, None, started)];
    let mut last_good: ParamSet<f64> = trainer.policy.params().clone();
    while trainer.updates_done() < cfg.train.updates {
        let stats = match trainer.iterate() {
            Ok(s) => s,
            Err(source @ CoreError::NonFinite { .. }) => {
                let update = trainer.updates_done() + 1;
                let checkpoint = out.join(LAST_GOOD_FILE);
                save_checkpoint(&last_good, &cfg.model, &checkpoint)?;
                let last_row = rows.last().map(|r| format!("{r:?}")).unwrap_or_default();
                write(
                    &out.join(DIAGNOSTICS_FILE),
                    &format!("update {update} failed: {source}\nlast metrics: {last_row}\n"),
                )?;
                write_csv(&out.join(METRICS_FILE), &rows)?;
                return Err(HarnessError::Diverged { update, checkpoint, source });
            }
            Err(e) => return Err(e.into()),
        };
        last_good = trainer.policy.params().clone();
        let done = trainer.updates_done();
        if done % cfg.train.eval_interval == 0 || done == cfg.train.updates {
            let returns = trainer.evaluate()?;
            let r = row(done, stats.env_steps, &returns, Some(&stats), started);
            let reached = target.is_some_and(|t| r.eval_return_mean >= t);
            rows.push(r);
            if reached {
                break;
            }
        }
    }

    let metrics_path = out.join(METRICS_FILE);
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    write_csv(&metrics_path, &rows)?;
    save_checkpoint(trainer.policy.params(), &cfg.model, &checkpoint_path)?;
    let final_return = rows.last().expect("initial row").eval_return_mean;
    Ok(TrainOutcome {
        rows,
        metrics_path,
        checkpoint_path,
        updates: trainer.updates_done(),
        initial_return,
        final_return,
        optimum,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub optimum: f64,
}

/// Greedy evaluation of a checkpoint, which must match `cfg.model`.
pub fn run_eval(cfg: &RunConfig, seed: u64, checkpoint: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    let policy = load_policy::<f64>(checkpoint, Some(&cfg.model))?;
    let mut env = cfg.env.build()?;
    let returns = evaluate(env.as_mut(), policy.as_ref(), cfg.train.eval_episodes, seed)?;
    let (mean, ci95) = mean_ci95(&returns);
    Ok(EvalOutcome { returns, mean, ci95, optimum: env.max_return() })
}
