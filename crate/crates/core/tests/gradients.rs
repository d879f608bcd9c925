use dpenet::gradcheck::run_suite;

#[test]
fn every_case_matches_finite_differences() {
    let cases = run_suite(11).unwrap();
    let mut failed = Vec::new();
    for c in &cases {
        eprintln!(
            "{:<24} max_rel_error {:.3e} checked {} skipped {}",
            c.name, c.report.max_rel_error, c.report.checked, c.report.skipped_kinks
        );
        if !c.passed() {
            failed.push(c.name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn suite_covers_the_required_ops() {
    let names: Vec<_> = run_suite(3).unwrap().into_iter().map(|c| c.name).collect();
    for required in [
        "add",
        "mean",
        "conv2d_1x1",
        "conv2d_3x3",
        "conv_transpose2d",
        "batch_norm_train",
        "relu",
        "sigmoid",
        "bce_with_logits",
        "dual_block_projection",
        "single_block",
        "desk_network",
    ] {
        assert!(names.contains(&required), "{required}");
    }
}
