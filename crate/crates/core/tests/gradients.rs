//! Finite-difference checks of the analytic gradients.

use gsc::losses::{FdProblem, LossConfig};

const IMG: [usize; 3] = [8, 10, 4];
const TXT: [usize; 3] = [6, 10, 4];

#[test]
fn analytic_gradients_match_central_differences() {
    let cfgs = [
        LossConfig::default(),
        LossConfig {
            tau1: 0.2,
            tau2: 0.5,
            gamma: 1.0,
        },
    ];
    for seed in 0..4 {
        for cfg in &cfgs {
            for b in [2, 5, 8] {
                let r = FdProblem::random(seed, b, &IMG, &TXT).unwrap().check(cfg, 1e-5, 1e-4).unwrap();
                assert!(r.pass, "seed {seed} B={b} {cfg:?}: {r:?}");
                assert_eq!(r.checked, (8 * 10 + 10 + 10 * 4 + 4) + (6 * 10 + 10 + 10 * 4 + 4));
            }
        }
    }
}

#[test]
fn labels_of_zero_and_deep_encoders() {
    let mut p = FdProblem::random(9, 6, &[5, 7, 7, 3], &[4, 6, 3]).unwrap();
    p.y = vec![1.0, 0.0, 0.5, 0.0, 1.0, 0.2];
    let r = p.check(&LossConfig { gamma: 0.3, ..LossConfig::default() }, 1e-5, 1e-4).unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn one_percent_gradient_error_is_caught() {
    for seed in 0..3 {
        let p = FdProblem::random(seed, 6, &IMG, &TXT).unwrap();
        let r = p.check_scaled(&LossConfig::default(), 1.01, 1e-5, 1e-4).unwrap();
        assert!(!r.pass);
        assert!(r.worst.is_some());
        assert!((r.max_rel_err - 0.01 / 1.01).abs() < 1e-4, "{}", r.max_rel_err);
    }
}

#[test]
fn infinite_tolerance_always_passes() {
    let p = FdProblem::random(0, 4, &IMG, &TXT).unwrap();
    assert!(p.check_scaled(&LossConfig::default(), 2.0, 1e-5, f64::INFINITY).unwrap().pass);
}
