//! Reduced-size runs of the reference suites; the acceptance target runs them in full.

use usdc_core::oracle::{
    cvar_suite, fd_barrier_derivatives, forward_invariance_suite, gradient_checks, qp_oracle_suite, reduction_suite,
    row_count_check, ttcbf_fd_suite, uncertainty_suite,
};
use usdc_core::dynamics::VehicleState;
use usdc_core::safety::{derivative_coeffs, h_ddot};

#[test]
fn qp_matches_grid() {
    let r = qp_oracle_suite(60, 1).unwrap();
    assert!(r.passed(1e-3, 1e-6), "{r:?}");
    assert_eq!(r.grid_wins, 0);
}

#[test]
fn barrier_derivatives_match_rollouts() {
    let r = ttcbf_fd_suite(100, 2, 1e-4);
    assert!(r.passed(1e-3), "{r:?}");
}

#[test]
fn fd_oracle_on_a_hand_case() {
    // Ego heading straight at a point 10 m ahead: ḣ = −2·10·v.
    let s = VehicleState::new(0.0, 0.0, 4.0, 0.0);
    let [h_dot, c0, c_a, c_w] = fd_barrier_derivatives(&s, [10.0, 0.0], 3.0, 1e-4);
    assert!((h_dot + 80.0).abs() < 1e-6);
    let d = derivative_coeffs(&s, [10.0, 0.0]);
    assert!((d.h_dot - h_dot).abs() < 1e-6);
    let analytic = h_ddot(&d, &s, 1.0, 0.0);
    assert!((analytic - (c0 + c_a)).abs() < 1e-4);
    assert!(c_w.abs() < 1e-4);
}

#[test]
fn gradients_match_finite_differences() {
    let checks = gradient_checks(3, 1e-4, 1e-6).unwrap();
    assert!(checks.len() >= 8);
    for c in checks {
        assert!(c.max_rel < 1e-4, "{c:?}");
    }
}

#[test]
fn cvar_identities() {
    assert!(cvar_suite(500, 4).unwrap().passed());
}

#[test]
fn uncertainty_identities() {
    let r = uncertainty_suite(5000, 5).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn filtered_rollouts_stay_outside_the_obstacle() {
    let r = forward_invariance_suite(100, 40, 6).unwrap();
    assert!(r.passed(), "{r:?}");
    assert!(r.rollouts > r.relaxed_rollouts);
}

#[test]
fn three_rows_per_obstacle_point_plus_road_rows() {
    let (got, want) = row_count_check(5, 4, 7).unwrap();
    assert_eq!(got, want);
    let (got, want) = row_count_check(2, 3, 8).unwrap();
    assert_eq!(got, want);
}

#[test]
fn reduced_ensemble_is_a_single_critic() {
    let r = reduction_suite(9, 2).unwrap();
    assert!(r.max_diff <= 1e-10, "{r:?}");
}
