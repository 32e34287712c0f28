//! Finite-difference checks for every differentiable primitive.

use resattn::gradcheck::suite::primitive_cases;
use resattn::gradcheck::GradcheckConfig;

#[test]
fn every_primitive_matches_finite_differences() {
    let cfg = GradcheckConfig::default();
    let mut failed = Vec::new();
    for case in primitive_cases(0) {
        let report = case.run(&cfg).unwrap();
        println!("{}:\n{report}", case.name);
        if !report.passed() {
            failed.push(case.name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn primitives_pass_under_another_seed() {
    let cfg = GradcheckConfig::default();
    for case in primitive_cases(17) {
        let report = case.run(&cfg).unwrap();
        assert!(report.passed(), "{}:\n{report}", case.name);
    }
}
