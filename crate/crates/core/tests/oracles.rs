use stra_core::verify::suites::oracle_suite;

#[test]
fn fast_kernels_match_naive_references() {
    let reports = oracle_suite(20, 11).unwrap();
    let labels: Vec<&str> = reports.iter().map(|r| r.label.as_str()).collect();
    for want in ["grouped conv", "local attention", "spatial masks", "modal vectors", "mode interaction", "mode attention", "non-local"] {
        assert!(labels.iter().any(|l| l.starts_with(want)), "no oracle for {want}: {labels:?}");
    }
    for r in &reports {
        assert!(r.passed, "{r}");
        assert_eq!(r.trials, 20);
    }
}
