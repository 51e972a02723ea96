use dwsim::calibration::calibration_suite;

#[test]
fn calibration_suite_passes() {
    let checks = calibration_suite(20_240_601).unwrap();
    assert_eq!(checks.len(), 5);
    for c in &checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}
