use vtsfe::check::check_all;
use vtsfe::diffcore::GradCheckOptions;

#[test]
fn every_kind_passes_on_random_draws() {
    for seed in 0..10 {
        for kc in check_all(seed, GradCheckOptions::default()).unwrap() {
            assert!(kc.report.passed(), "seed {seed}, {}\n{}", kc.kind, kc.report);
        }
    }
}

#[test]
fn tight_tolerance_is_a_negative_control() {
    let opts = GradCheckOptions { h: 1e-5, tol: 1e-12 };
    let checks = check_all(0, opts).unwrap();
    assert!(checks.iter().any(|kc| !kc.report.passed()));
}
