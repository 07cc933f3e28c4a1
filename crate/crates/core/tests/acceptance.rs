use std::time::Duration;

use exitpipe::train::RunConfig;
use exitpipe::verify::{estimator_statistics, run_suite, CRITERIA, ESTIMATOR_TRIALS, FILL_ITERATIONS};

#[test]
fn acceptance_criteria() {
    let cfg = RunConfig::default();
    let reports = run_suite(&cfg, &[], |r| println!("{}", r.line()));
    assert_eq!(reports.len(), CRITERIA.len());
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.line()).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
    assert!(reports[0].elapsed < Duration::from_secs(120), "gradient suite took {:?}", reports[0].elapsed);
    assert!(reports[7].elapsed < Duration::from_secs(600), "convergence took {:?}", reports[7].elapsed);
}

#[test]
fn unrescaled_fill_fails_the_estimator_criterion() {
    let mut cfg = RunConfig::default();
    cfg.training.rescale_fill = false;
    let r = estimator_statistics(&cfg, ESTIMATOR_TRIALS, FILL_ITERATIONS);
    println!("{}", r.line());
    assert!(!r.passed);
    assert!(r.detail.contains("biased"), "{}", r.detail);
}
