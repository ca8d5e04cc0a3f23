//! The suite must notice a planted error in the neuron computation.

use neurogrow::verify::{run_check, run_invariant_suite, Fault};

#[test]
fn flipped_neuron_sign_fails_exactness() {
    let clean = run_check("fc_exactness", 0, Fault::None).unwrap();
    assert!(clean.passed, "{}", clean.line());
    let broken = run_check("fc_exactness", 0, Fault::FlipNeuronSign).unwrap();
    assert!(!broken.passed, "{}", broken.line());
}

#[test]
fn filtered_report_reflects_the_fault() {
    let report = run_invariant_suite(3, Some("fc_exactness"), Fault::FlipNeuronSign);
    assert_eq!(report.checks.len(), 1);
    assert!(!report.all_passed());
    assert!(report.to_csv().lines().nth(1).unwrap().contains(",fail,"));
}

#[test]
fn unknown_check_is_none() {
    assert!(run_check("no_such_check", 0, Fault::None).is_none());
}
