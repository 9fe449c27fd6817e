use s2st_core::selfcheck::{block_checks, model_check, op_checks};

fn assert_all(results: Vec<s2st_core::selfcheck::CheckResult>) {
    for r in &results {
        println!("{:<50} {:.3e} (< {:.0e})", r.name, r.error, r.tolerance);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn every_op_matches_finite_differences() {
    assert_all(op_checks(7).unwrap());
}

#[test]
fn network_blocks_match_finite_differences() {
    for seed in [1, 7] {
        assert_all(block_checks(seed).unwrap());
    }
}

#[test]
fn micro_model_matches_finite_differences() {
    assert_all(vec![model_check(7).unwrap()]);
}
