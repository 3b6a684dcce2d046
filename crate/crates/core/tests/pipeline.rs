use conmem::experiment::{
    read_metrics_csv, read_routing_csv, reproduce_suite, run_experiment, run_or_reuse, verify_dir,
    ExperimentConfig, Suite, SuiteOptions,
};

#[test]
fn smoke_experiment_is_complete_and_verifiable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::smoke().resolved();
    let art = run_experiment(&cfg, tmp.path()).unwrap();
    let s = &art.summary;
    assert_eq!(s.config_hash, cfg.hash());
    assert_eq!(s.steps, cfg.model.steps);
    assert!(s.eval.queries > 0);
    let metrics = read_metrics_csv(&tmp.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.last().map(|r| r.step), Some(cfg.model.steps));
    assert!(!read_routing_csv(&tmp.path().join("routing-log.csv"))
        .unwrap()
        .is_empty());
    let t = s
        .transfer
        .as_ref()
        .expect("smoke preset runs the transfer arm");
    assert!((0.0..=1.0).contains(&t.transferred_attention));
    let report = verify_dir(tmp.path()).unwrap();
    assert!(report.ok(), "{:?}", report.problems);
}

#[test]
fn finished_runs_are_reused_only_for_the_same_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::smoke();
    cfg.analysis.transfer = None;
    let cfg = cfg.resolved();
    let first = run_experiment(&cfg, tmp.path()).unwrap();
    let stamp = std::fs::metadata(tmp.path().join("metrics.csv"))
        .unwrap()
        .modified()
        .unwrap();
    let again = run_or_reuse(&cfg, tmp.path()).unwrap();
    assert_eq!(first.summary, again.summary);
    assert_eq!(
        std::fs::metadata(tmp.path().join("metrics.csv"))
            .unwrap()
            .modified()
            .unwrap(),
        stamp
    );
    let mut other = cfg.clone();
    other.seed += 1;
    let other = other.resolved();
    let rerun = run_or_reuse(&other, tmp.path()).unwrap();
    assert_eq!(rerun.summary.config_hash, other.hash());
}

#[test]
fn theory_suites_need_no_training() {
    let tmp = tempfile::tempdir().unwrap();
    let opts = SuiteOptions {
        seeds: vec![0, 1],
        ..SuiteOptions::default()
    };
    for suite in [Suite::Phase, Suite::Oracle] {
        let report = reproduce_suite(suite, tmp.path(), &opts).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert!(!report.rows.is_empty());
        assert!(tmp.path().join(suite.name()).join("summary.txt").exists());
    }
}
