//! EM fitting of the two-component mixture.

use gsc::discrimination::{gmm_fit, gmm_fit_trace, gmm_posterior, DEFAULT_EM_ITERS, DEFAULT_VARIANCE_FLOOR};
use gsc::numerics::Rng;

fn two_clusters(seed: u64, n: usize, lo: f64, hi: f64, sd: f64, frac_lo: f64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let m = if rng.uniform(0.0, 1.0) < frac_lo { lo } else { hi };
            m + sd * rng.normal()
        })
        .collect()
}

#[test]
fn log_likelihood_never_decreases() {
    for seed in 0..20 {
        let mut rng = Rng::new(1000 + seed);
        let frac = rng.uniform(0.1, 0.9);
        let sd = rng.uniform(0.02, 0.3);
        let s = two_clusters(seed, 200 + 37 * seed as usize, rng.uniform(-0.5, 0.3), rng.uniform(0.3, 1.0), sd, frac);
        let (_, trace) = gmm_fit_trace(&s, 200, DEFAULT_VARIANCE_FLOOR).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn recovers_separated_means() {
    for seed in 0..5 {
        let s = two_clusters(seed, 2000, 0.1, 0.9, 0.05, 0.4);
        let g = gmm_fit(&s, DEFAULT_EM_ITERS, DEFAULT_VARIANCE_FLOOR).unwrap();
        let noisy = 1 - g.clean;
        assert!((g.means[g.clean] - 0.9).abs() < 0.02, "{g:?}");
        assert!((g.means[noisy] - 0.1).abs() < 0.02, "{g:?}");
        assert!((g.weights[noisy] - 0.4).abs() < 0.05, "{g:?}");
        assert!(gmm_posterior(&g, 0.95) > 0.99);
        assert!(gmm_posterior(&g, 0.05) < 0.01);
    }
}

#[test]
fn identical_scores_hit_the_variance_floor() {
    let g = gmm_fit(&[0.5; 40], DEFAULT_EM_ITERS, DEFAULT_VARIANCE_FLOOR).unwrap();
    assert!(g.variances.iter().all(|&v| v >= DEFAULT_VARIANCE_FLOOR));
    assert_eq!(g.means, [0.5, 0.5]);
    assert_eq!(g.variances, [DEFAULT_VARIANCE_FLOOR; 2]);
    assert!((gmm_posterior(&g, 0.5) - 0.5).abs() < 1e-12);
    assert!((gmm_posterior(&g, 0.9) - 0.5).abs() < 1e-12);
}

#[test]
fn rejects_bad_input() {
    assert!(gmm_fit(&[0.1, 0.2, 0.3], 10, 1e-4).is_err());
    assert!(gmm_fit(&[0.1, f64::NAN, 0.3, 0.4], 10, 1e-4).is_err());
    assert!(gmm_fit(&[0.1, 0.2, 0.3, 0.4], 10, 0.0).is_err());
}
