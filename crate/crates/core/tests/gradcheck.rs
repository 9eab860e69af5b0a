mod common;

use common::grad::{all_cases, TOL};

#[test]
fn seeded_cases_match_finite_differences() {
    let cases = all_cases();
    assert!(cases.len() >= 100);
    let mut worst = 0.0f64;
    for case in &cases {
        let r = &case.report;
        assert!(r.checked > 0, "{} checked no coordinate", case.name);
        assert!(r.passed(), "{}: {:?}", case.name, r.failures);
        worst = worst.max(r.max_rel_error);
    }
    println!("{} cases, worst relative error {worst:.2e}", cases.len());
    assert!(worst < TOL);
}
