//! Finite-difference behaviour of the analytic gradients beyond the default
//! per-layer run.

use nodule3d::gradcheck::{
    check_network, run_gradcheck, GradcheckOptions, BATCHNORM_THRESHOLD, THRESHOLD,
};

#[test]
fn whole_network_matches_finite_differences() {
    for seed in 0..4 {
        for batchnorm in [false, true] {
            let c = check_network(seed, batchnorm).unwrap();
            assert!(c.passed(), "seed {seed}: {c:?}");
            assert!(c.coordinates > 100);
        }
    }
}

#[test]
fn curved_layer_errors_are_truncation() {
    // central differences carry O(ε²) truncation error on curved functions
    // (bce, batchnorm) and only round-off on piecewise-linear ones, so a
    // tenfold smaller step must cut the curved layers' worst error by well
    // over tenfold (until round-off takes over); a wrong analytic gradient
    // would leave it flat
    let at = |epsilon| {
        run_gradcheck(&GradcheckOptions {
            epsilon,
            ..GradcheckOptions::default()
        })
        .unwrap()
        .layers
    };
    let (coarse, fine) = (at(1e-3), at(1e-4));
    for (c, f) in coarse.iter().zip(&fine) {
        assert_eq!(c.layer, f.layer);
        let limit = if f.layer == "batchnorm" {
            BATCHNORM_THRESHOLD
        } else {
            THRESHOLD
        };
        assert!(
            f.max_rel_error < limit / 10.0,
            "{}: {:e} at ε=1e-4",
            f.layer,
            f.max_rel_error
        );
        if matches!(f.layer, "bce" | "batchnorm") {
            assert!(
                f.max_rel_error < c.max_rel_error / 20.0,
                "{}: {:e} -> {:e}",
                f.layer,
                c.max_rel_error,
                f.max_rel_error
            );
        }
    }
}

#[test]
fn corrupted_backward_is_caught_at_any_step() {
    for epsilon in [1e-3, 1e-5] {
        let opts = GradcheckOptions {
            epsilon,
            trials: 5,
            corrupt_conv_backward: true,
            ..GradcheckOptions::default()
        };
        assert!(!run_gradcheck(&opts).unwrap().passed());
    }
}
