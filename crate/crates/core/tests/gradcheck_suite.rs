//! The full finite-difference suite must pass at tol 1e-3 (eps 1e-5, f64)
//! and finish quickly on a single core.

use std::time::Instant;

use fscn_core::gradcheck::{all_passed, format_report_table, run_full_suite, SuiteConfig};

#[test]
fn full_suite_passes_within_budget() {
    let start = Instant::now();
    let reports = run_full_suite(&SuiteConfig::default());
    let elapsed = start.elapsed();
    println!("{}", format_report_table(&reports));
    println!("suite wall time: {:.1}s", elapsed.as_secs_f64());
    for r in &reports {
        assert!(
            r.passed,
            "{} failed with max rel err {}",
            r.op_name, r.max_rel_error
        );
    }
    assert!(all_passed(&reports));
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "suite took {:.1}s, budget is 120s",
        elapsed.as_secs_f64()
    );
}
