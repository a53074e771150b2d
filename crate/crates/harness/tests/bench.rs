use mam_core::ModelKind;
use mam_harness::metrics::{read_csv, write_csv};
use mam_harness::{run_bench, BenchRow, RunConfig};

#[test]
fn small_grid_produces_a_row_per_model_and_agent_count() {
    let cfg = RunConfig::parse(
        "model.d_model = 8\nmodel.state_dim = 2\nmodel.dt_rank = 2\nmodel.attn_blocks = 1\n\
         bench.agents = 4, 2, 8\nbench.repetitions = 3\nbench.warmup = 1\nbench.min_sample_secs = 0.0005\n",
        "t",
    )
    .unwrap();
    let report = run_bench(&cfg, 0).unwrap();
    assert_eq!(report.rows.len(), 6);
    let grid: Vec<(String, usize)> = report.rows.iter().map(|r| (r.model.clone(), r.n_agents)).collect();
    let expected: Vec<(String, usize)> =
        ["mam", "attention"].iter().flat_map(|m| [2, 4, 8].map(|n| (m.to_string(), n))).collect();
    assert_eq!(grid, expected);
    assert!(report.rows.iter().all(|r| r.seconds_per_step > 0.0 && r.repetitions == 3 && r.inner >= 1));
    for kind in [ModelKind::Mam, ModelKind::Attention] {
        assert!(report.slope(kind).unwrap().is_finite());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    write_csv(&path, &report.rows).unwrap();
    let back: Vec<BenchRow> = read_csv(&path).unwrap();
    assert_eq!(back, report.rows);
}
