use mam_harness::verify::report_json;
use mam_harness::{run_verify, Fault};

const SUITES: [&str; 9] = [
    "scan_vs_implicit_matrix",
    "parallel_vs_sequential_scan",
    "gradient_checks",
    "encoder_full_dependence",
    "decoder_causality",
    "teacher_forcing_consistency",
    "incremental_vs_recompute",
    "gae_oracle",
    "advantage_decomposition",
];

#[test]
fn clean_build_passes_every_suite_exactly_once() {
    let report = run_verify(0, Fault::None);
    let names: Vec<&str> = report.checks.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, SUITES);
    for c in &report.checks {
        assert!(c.passed && c.observed <= c.tolerance && c.cases > 0, "{c:?}");
    }
    assert!(report.passed);

    let json: serde_json::Value = serde_json::from_str(&report_json(&report).unwrap()).unwrap();
    assert_eq!(json["passed"], true);
    assert_eq!(json["checks"].as_array().unwrap().len(), SUITES.len());
    assert!(json["checks"][0]["tolerance"].is_number());
}

#[test]
fn injected_scan_fault_fails_the_matrix_oracle_only() {
    let report = run_verify(1, Fault::ZohScan);
    assert!(!report.passed);
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["scan_vs_implicit_matrix"]);
}
