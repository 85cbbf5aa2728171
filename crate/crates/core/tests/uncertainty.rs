use proptest::prelude::*;
use usdc_core::distrl::quantile::{cvar, cvar_weights};
use usdc_core::uncertainty::{
    aleatoric, epistemic, joint, joint_weights, squash, SigmaBuffer, UncertaintyEstimator, COLD_START,
};

#[test]
fn cold_buffers_are_neutral() {
    let b = SigmaBuffer::new(50);
    assert!(b.is_cold());
    assert_eq!(b.percentile(3.0), 0.5);
    assert_eq!(b.normalize(0.0), 0.5);
}

#[test]
fn buffer_keeps_the_most_recent_values() {
    let mut b = SigmaBuffer::new(3);
    for x in 0..5 {
        b.push(x as f64);
    }
    assert_eq!(b.values(), vec![2.0, 3.0, 4.0]);
    assert_eq!(b.pushed(), 5);
    let r = SigmaBuffer::restore(3, &b.values(), b.pushed()).unwrap();
    assert_eq!(r, b);
    assert!(SigmaBuffer::restore(2, &[1.0, 2.0, 3.0], 3).is_err());
}

#[test]
fn warm_percentile_counts_stored_values() {
    let mut b = SigmaBuffer::new(1000);
    for i in 0..COLD_START {
        b.push(i as f64);
    }
    assert!(!b.is_cold());
    assert_eq!(b.percentile(-1.0), 0.0);
    assert_eq!(b.percentile(1e9), 1.0);
    assert!((b.percentile(49.0) - 0.5).abs() < 1e-12);
}

#[test]
fn estimator_normalizes_before_pushing() {
    let mut e = UncertaintyEstimator::new(10_000);
    let s = e.observe_sigmas(2.0, 1.0);
    assert_eq!(s.percentile, 0.5);
    assert_eq!(e.au.len(), 1);
    assert_eq!(e.ju.values(), vec![s.sigma_ju]);
    assert!((s.weights[0] + s.weights[1] - 1.0).abs() < 1e-15);
}

#[test]
fn observe_uses_cvar_of_each_member() {
    let w = cvar_weights(4, 0.5).unwrap();
    let a = [0.0, 1.0, 2.0, 3.0];
    let b = [2.0, 3.0, 4.0, 5.0];
    let mut e = UncertaintyEstimator::new(100);
    let s = e.observe(&[&a, &b], &w).unwrap();
    let ca = cvar(&a, 0.5).unwrap();
    let cb = cvar(&b, 0.5).unwrap();
    assert!((s.sigma_eu - (ca - cb).abs() / 2.0).abs() < 1e-15);
    assert!((s.sigma_au - aleatoric(&[&a, &b])).abs() < 1e-15);
}

#[test]
fn equal_levels_split_evenly() {
    assert_eq!(joint_weights(0.3, 0.3), [0.5, 0.5]);
    assert!((joint(2.0, 4.0, 0.7, 0.7) - 3.0).abs() < 1e-15);
    assert_eq!(joint(1.5, 1.5, 0.1, 0.9), 1.5);
}

proptest! {
    #[test]
    fn joint_is_between_its_inputs(sa in 0.0..1e3f64, se in 0.0..1e3f64, ua in 0.0..1.0f64, ue in 0.0..1.0f64) {
        let j = joint(sa, se, ua, ue);
        prop_assert!(j >= sa.min(se) && j <= sa.max(se));
    }

    #[test]
    fn weights_sum_to_one(ua in -1e3..1e3f64, ue in -1e3..1e3f64) {
        let w = joint_weights(ua, ue);
        prop_assert!((w[0] + w[1] - 1.0).abs() <= 1e-12);
        prop_assert!(w[0] >= 0.0 && w[1] >= 0.0);
    }

    #[test]
    fn epistemic_scales_with_the_cvars(xs in prop::collection::vec(-100.0..100.0f64, 2..8), c in -10.0..10.0f64) {
        let scaled: Vec<f64> = xs.iter().map(|x| c * x).collect();
        let a = epistemic(&xs).unwrap();
        let b = epistemic(&scaled).unwrap();
        prop_assert!((b - c.abs() * a).abs() <= 1e-9 * (1.0 + b));
    }

    #[test]
    fn squash_is_monotone_and_bounded(x in -1e3..1e3f64, dx in 0.0..10.0f64, mu in -10.0..10.0f64, eta in 1e-3..10.0f64) {
        let a = squash(x, mu, eta);
        let b = squash(x + dx, mu, eta);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b >= a);
    }

    #[test]
    fn snapshot_invariants(pairs in prop::collection::vec((0.0..50.0f64, 0.0..50.0f64), 1..300)) {
        let mut e = UncertaintyEstimator::new(128);
        for (sa, se) in pairs {
            let s = e.observe_sigmas(sa, se);
            prop_assert!(s.sigma_ju >= sa.min(se) && s.sigma_ju <= sa.max(se));
            prop_assert!((0.0..=1.0).contains(&s.percentile));
            prop_assert!((0.0..=1.0).contains(&s.u_ju));
        }
        prop_assert!(e.ju.len() <= 128);
    }
}
