use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usdc_core::dynamics::{ActionBounds, ControlCommand, VehicleState};
use usdc_core::oracle::{grid_search, random_filter_instance};
use usdc_core::safety::{
    assemble, halfspaces, kkt_residuals, solve_filter, tightening, CbfParams, ConstraintRow, FilterStatus, RowKind,
    SafetyConfig,
};

fn row(coef_a: f64, coef_tan: f64, h_cst: f64) -> ConstraintRow {
    ConstraintRow {
        coef_a,
        coef_tan,
        h_cst,
        tightening: 0.0,
        dt: 1.0,
        kind: RowKind::Vehicle,
        source: 0,
        ego_circle: 0,
        h: 1.0,
    }
}

fn penalized(target: [f64; 2], rows: &[ConstraintRow], rho: f64, z: [f64; 2]) -> f64 {
    let d = [z[0] - target[0], z[1] - target[1]];
    let viol: f64 = rows.iter().map(|r| (-r.residual(z[0], z[1])).max(0.0)).sum();
    0.5 * (d[0] * d[0] + d[1] * d[1]) + rho * viol
}

#[test]
fn feasible_command_passes_through() {
    let u = ControlCommand::new(0.5, 0.05);
    let r = solve_filter(u, &[row(1.0, 0.0, 0.0)], &ActionBounds::default(), &SafetyConfig::default(), &[]).unwrap();
    assert_eq!(r.status, FilterStatus::Unmodified);
    assert_eq!(r.u, u);
}

#[test]
fn single_row_projection() {
    // a ≥ 1 pushes a = 0 to exactly 1.
    let u = ControlCommand::new(0.0, 0.0);
    let r = solve_filter(u, &[row(1.0, 0.0, -1.0)], &ActionBounds::default(), &SafetyConfig::default(), &[]).unwrap();
    assert_eq!(r.status, FilterStatus::Modified);
    assert!((r.u.a_lon - 1.0).abs() < 1e-12);
    assert!(r.u.delta.abs() < 1e-12);
    assert_eq!(r.active, vec![0]);
}

#[test]
fn contradictory_rows_are_relaxed_within_the_box() {
    let bounds = ActionBounds::default();
    let rows = [row(1.0, 0.0, -1.0), row(-1.0, 0.0, 0.0)];
    let r = solve_filter(ControlCommand::new(0.3, 0.0), &rows, &bounds, &SafetyConfig::default(), &[]).unwrap();
    assert_eq!(r.status, FilterStatus::Relaxed);
    assert!(bounds.contains(r.u, 1e-12));
    assert!(r.max_residual > 0.0);
}

#[test]
fn grid_agrees_on_random_feasible_instances() {
    let bounds = ActionBounds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lo = [bounds.a_min, bounds.delta_min.tan()];
    let hi = [bounds.a_max, bounds.delta_max.tan()];
    for _ in 0..40 {
        let (u, rows) = random_filter_instance(&mut rng, &bounds);
        let r = solve_filter(u, &rows, &bounds, &SafetyConfig::default(), &[]).unwrap();
        let t = [u.a_lon, u.delta.tan()];
        let z = [r.u.a_lon, r.u.delta.tan()];
        let f = 0.5 * ((z[0] - t[0]).powi(2) + (z[1] - t[1]).powi(2));
        let cons = halfspaces(&rows, &bounds);
        let (g, _) = grid_search(t, &cons, lo, hi, 200).unwrap();
        assert!((f - g).abs() < 1e-3, "qp {f} grid {g}");
        let k = kkt_residuals(t, &cons, z, &r.multipliers);
        assert!(k.stationarity < 1e-8 && k.primal < 1e-8 && k.min_multiplier > -1e-10);
    }
}

#[test]
fn relaxation_beats_a_dense_scan_of_the_penalized_objective() {
    let bounds = ActionBounds::default();
    let cfg = SafetyConfig {
        slack_penalty: 3.0,
        ..SafetyConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    use rand::Rng;
    let (w_lo, w_hi) = (bounds.delta_min.tan(), bounds.delta_max.tan());
    let mut checked = 0;
    while checked < 25 {
        let rows: Vec<ConstraintRow> = (0..rng.gen_range(2..6))
            .map(|_| row(rng.gen_range(-2.0..2.0), rng.gen_range(-8.0..8.0), rng.gen_range(-6.0..2.0)))
            .collect();
        let u = ControlCommand::new(rng.gen_range(bounds.a_min..bounds.a_max), rng.gen_range(-0.4..0.4));
        let r = solve_filter(u, &rows, &bounds, &cfg, &[]).unwrap();
        if r.status != FilterStatus::Relaxed {
            continue;
        }
        checked += 1;
        let t = [u.a_lon, u.delta.tan()];
        let got = penalized(t, &rows, cfg.slack_penalty, [r.u.a_lon, r.u.delta.tan()]);
        let n = 300;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let z = [
                    bounds.a_min + (bounds.a_max - bounds.a_min) * i as f64 / n as f64,
                    w_lo + (w_hi - w_lo) * j as f64 / n as f64,
                ];
                best = best.min(penalized(t, &rows, cfg.slack_penalty, z));
            }
        }
        assert!(got <= best + 1e-9, "relaxed {got} scan {best}");
    }
}

#[test]
fn uncertainty_tightens_rows() {
    let p = CbfParams::default();
    assert!(tightening(&p, 0.1, 1.0) > tightening(&p, 0.1, 0.0));
    let ego = VehicleState::new(0.0, 0.0, 5.0, 0.0);
    let env = usdc_core::dynamics::envelope(&VehicleState::new(12.0, 0.5, 0.0, 0.0));
    let prox = usdc_core::dynamics::closest_points(&ego, &[env], &[], 5, 4);
    let loose = assemble(&ego, &prox, &p, 0.1, 0.0);
    let tight = assemble(&ego, &prox, &p, 0.1, 1.0);
    for (a, b) in loose.iter().zip(&tight) {
        assert!(b.residual(0.0, 0.0) < a.residual(0.0, 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn filter_output_is_feasible_and_optimal(seed in 0u64..1_000_000) {
        let bounds = ActionBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, rows) = random_filter_instance(&mut rng, &bounds);
        let r = solve_filter(u, &rows, &bounds, &SafetyConfig::default(), &[]).unwrap();
        prop_assert_ne!(r.status, FilterStatus::Relaxed);
        prop_assert!(bounds.contains(r.u, 1e-9));
        let z = [r.u.a_lon, r.u.delta.tan()];
        for row in &rows {
            prop_assert!(row.residual(z[0], z[1]) >= -1e-8);
        }
        let k = kkt_residuals([u.a_lon, u.delta.tan()], &halfspaces(&rows, &bounds), z, &r.multipliers);
        prop_assert!(k.stationarity < 1e-8);
        prop_assert!(k.complementarity < 1e-8);
    }

    #[test]
    fn warm_start_does_not_change_the_answer(seed in 0u64..1_000_000) {
        let bounds = ActionBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, rows) = random_filter_instance(&mut rng, &bounds);
        let cold = solve_filter(u, &rows, &bounds, &SafetyConfig::default(), &[]).unwrap();
        let warm = solve_filter(u, &rows, &bounds, &SafetyConfig::default(), &cold.active).unwrap();
        prop_assert!((cold.u.a_lon - warm.u.a_lon).abs() < 1e-9);
        prop_assert!((cold.u.delta - warm.u.delta).abs() < 1e-9);
    }
}
