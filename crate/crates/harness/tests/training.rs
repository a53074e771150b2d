use mam_core::init_model;
use mam_harness::checkpoint::load_checkpoint;
use mam_harness::metrics::{read_csv, strip_timing};
use mam_harness::run::{DIAGNOSTICS_FILE, LAST_GOOD_FILE};
use mam_harness::{run_eval, run_train, HarnessError, MetricsRow, RunConfig};

const SMALL: &str = "\
[model]
d_model = 16
state_dim = 4
dt_rank = 4
attn_blocks = 1
[train]
updates = 3
rollout_length = 32
eval_interval = 2
eval_episodes = 4
";

fn config(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("{extra}{SMALL}"), "test").unwrap()
}

#[test]
fn identical_runs_give_identical_metrics_and_checkpoints() {
    for kind in ["mam", "attention"] {
        let cfg = config(&format!("model.kind = {kind}\nenv.name = foraging\n"));
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_train(&cfg, 5, a.path()).unwrap();
        let rb = run_train(&cfg, 5, b.path()).unwrap();
        let text = |p: &std::path::Path| strip_timing(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(text(&ra.metrics_path), text(&rb.metrics_path));
        assert_eq!(std::fs::read(&ra.checkpoint_path).unwrap(), std::fs::read(&rb.checkpoint_path).unwrap());

        let c = tempfile::tempdir().unwrap();
        let rc = run_train(&cfg, 6, c.path()).unwrap();
        assert_ne!(std::fs::read(&ra.checkpoint_path).unwrap(), std::fs::read(&rc.checkpoint_path).unwrap());
    }
}

#[test]
fn metrics_rows_cover_initial_interval_and_final_updates() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_train(&config(""), 0, dir.path()).unwrap();
    let rows: Vec<MetricsRow> = read_csv(&out.metrics_path).unwrap();
    assert_eq!(rows.iter().map(|r| r.update).collect::<Vec<_>>(), vec![0, 2, 3]);
    assert_eq!(rows.iter().map(|r| r.env_steps).collect::<Vec<_>>(), vec![0, 64, 96]);
    assert!(rows[0].loss_total.is_nan() && rows[0].grad_norm.is_nan());
    assert!(rows[1..].iter().all(|r| r.loss_total.is_finite() && r.grad_norm.is_finite() && r.eval_episodes == 4));
    assert!(rows.iter().all(|r| r.schema_version == 1));
    let header = std::fs::read_to_string(&out.metrics_path).unwrap();
    assert!(header.starts_with("schema_version,update,env_steps,"));
    assert_eq!(out.updates, 3);
    assert_eq!(out.final_return, rows[2].eval_return_mean);
}

#[test]
fn evaluation_loads_the_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("");
    let out = run_train(&cfg, 1, dir.path()).unwrap();
    let eval = run_eval(&cfg, 9, &out.checkpoint_path).unwrap();
    assert_eq!(eval.returns.len(), 4);
    assert_eq!(eval.optimum, 16.0);
    assert!(eval.returns.iter().all(|r| (0.0..=16.0).contains(r)));
    assert_eq!(run_eval(&cfg, 9, &out.checkpoint_path).unwrap(), eval);
}

#[test]
fn divergence_saves_last_good_parameters_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("train.learning_rate = 1e300\n");
    let err = run_train(&cfg, 3, dir.path()).unwrap_err();
    let HarnessError::Diverged { update, checkpoint, .. } = &err else { panic!("unexpected error {err}") };
    assert_eq!(err.exit_code(), 7);
    assert_eq!(*update, 1);
    assert_eq!(*checkpoint, dir.path().join(LAST_GOOD_FILE));
    let (_, params) = load_checkpoint::<f64>(checkpoint).unwrap();
    assert!(params.bit_eq(init_model::<f64>(&cfg.model, 3).unwrap().params()));
    let diag = std::fs::read_to_string(dir.path().join(DIAGNOSTICS_FILE)).unwrap();
    assert!(diag.contains("update 1") && diag.contains("non-finite"), "{diag}");
}
