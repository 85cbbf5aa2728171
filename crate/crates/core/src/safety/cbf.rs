//! Truncated-Taylor barrier rows for the distance constraints.

use serde::{Deserialize, Serialize};

use crate::dynamics::{envelope, dist, Proximity, VehicleState};

/// `|p − q|² − r²`
pub fn cbf_value(p: [f64; 2], q: [f64; 2], r: f64) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    dx * dx + dy * dy - r * r
}

/// `h` for every ego circle against every obstacle point, circle-major.
pub fn cbf_values(ego: &VehicleState, prox: &Proximity) -> Vec<f64> {
    let env = envelope(ego);
    let mut out = Vec::with_capacity(3 * prox.obstacles.len() + prox.boundary.len());
    for c in env.centers {
        for o in &prox.obstacles {
            out.push(cbf_value(c, o.center, o.radius + env.radius));
        }
    }
    for b in &prox.boundary {
        let c = nearest_circle(&env.centers, b.point);
        out.push(cbf_value(env.centers[c], b.point, env.radius));
    }
    out
}

fn nearest_circle(centers: &[[f64; 2]; 3], q: [f64; 2]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if dist(centers[i], q) < dist(centers[best], q) {
            best = i;
        }
    }
    best
}

/// First derivative of `h` and the projections that carry the inputs into `ḧ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derivatives {
    pub h_dot: f64,
    pub d_lon: f64,
    pub d_lat: f64,
}

/// `ḣ` and `(Δ_lon, Δ_lat)` for `h = |(x, y) − p|² − r²` along the bicycle model with
/// a static point `p`.
pub fn derivative_coeffs(s: &VehicleState, p: [f64; 2]) -> Derivatives {
    let (sin, cos) = s.phi.sin_cos();
    let dx = s.x - p[0];
    let dy = s.y - p[1];
    Derivatives {
        h_dot: 2.0 * dx * s.v * cos + 2.0 * dy * s.v * sin,
        d_lon: dx * cos + dy * sin,
        d_lat: -dx * sin + dy * cos,
    }
}

/// `ḧ = 2v² + 2a·Δ_lon + 2v²·tanδ·Δ_lat / L`
pub fn h_ddot(d: &Derivatives, s: &VehicleState, a_lon: f64, tan_delta: f64) -> f64 {
    2.0 * s.v * s.v + 2.0 * a_lon * d.d_lon + 2.0 * s.v * s.v * tan_delta * d.d_lat / s.wheelbase
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbfParams {
    /// Remainder bound Γ.
    pub gamma: f64,
    pub lambda_veh: f64,
    pub lambda_road: f64,
    /// Weight of the normalized joint uncertainty in the tightening.
    pub c_w: f64,
}

impl Default for CbfParams {
    fn default() -> Self {
        Self {
            gamma: 300.0,
            lambda_veh: 0.2,
            lambda_road: 0.5,
            c_w: 2.0,
        }
    }
}

/// `ΓΔt³·(1 + c_w·u_ju)` where `u_ju ∈ [0, 1]` is the normalized joint uncertainty.
pub fn tightening(p: &CbfParams, dt: f64, u_ju: f64) -> f64 {
    p.gamma * dt.powi(3) * (1.0 + p.c_w * u_ju)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Vehicle,
    Road,
}

/// `Δt²·(coef_a·a + coef_tan·tanδ) + h_cst − tightening ≥ 0`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub coef_a: f64,
    pub coef_tan: f64,
    pub h_cst: f64,
    pub tightening: f64,
    pub dt: f64,
    pub kind: RowKind,
    /// Index into the obstacle or boundary list.
    pub source: usize,
    pub ego_circle: usize,
    pub h: f64,
}

impl ConstraintRow {
    /// Row as `g·(a, tanδ) ≥ b`.
    pub fn halfspace(&self) -> ([f64; 2], f64) {
        let dt2 = self.dt * self.dt;
        ([dt2 * self.coef_a, dt2 * self.coef_tan], self.tightening - self.h_cst)
    }

    pub fn residual(&self, a_lon: f64, tan_delta: f64) -> f64 {
        let dt2 = self.dt * self.dt;
        dt2 * (self.coef_a * a_lon + self.coef_tan * tan_delta) + self.h_cst - self.tightening
    }
}

fn row(
    circle: &VehicleState,
    point: [f64; 2],
    radius: f64,
    lambda: f64,
    dt: f64,
    w: f64,
    kind: RowKind,
    source: usize,
    ego_circle: usize,
) -> ConstraintRow {
    let h = cbf_value([circle.x, circle.y], point, radius);
    let d = derivative_coeffs(circle, point);
    let v2 = circle.v * circle.v;
    ConstraintRow {
        coef_a: d.d_lon,
        coef_tan: v2 * d.d_lat / circle.wheelbase,
        h_cst: dt * d.h_dot + lambda * h + dt * dt * v2,
        tightening: w,
        dt,
        kind,
        source,
        ego_circle,
        h,
    }
}

/// `3N` vehicle rows (circle-major) followed by `M` road rows. Each ego circle is
/// moved with the vehicle's speed and heading.
pub fn assemble(ego: &VehicleState, prox: &Proximity, p: &CbfParams, dt: f64, u_ju: f64) -> Vec<ConstraintRow> {
    let env = envelope(ego);
    let w = tightening(p, dt, u_ju);
    let at = |c: [f64; 2]| VehicleState { x: c[0], y: c[1], ..*ego };
    let mut rows = Vec::with_capacity(3 * prox.obstacles.len() + prox.boundary.len());
    for (i, c) in env.centers.iter().enumerate() {
        let s = at(*c);
        for (j, o) in prox.obstacles.iter().enumerate() {
            rows.push(row(&s, o.center, o.radius + env.radius, p.lambda_veh, dt, w, RowKind::Vehicle, j, i));
        }
    }
    for (j, b) in prox.boundary.iter().enumerate() {
        let i = nearest_circle(&env.centers, b.point);
        let s = at(env.centers[i]);
        rows.push(row(&s, b.point, env.radius, p.lambda_road, dt, w, RowKind::Road, j, i));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::closest_points;

    #[test]
    fn value_cases() {
        assert_eq!(cbf_value([0.0, 0.0], [2.0, 0.0], 2.0), 0.0);
        assert_eq!(cbf_value([0.0, 0.0], [3.0, 4.0], 2.0), 21.0);
        assert_eq!(cbf_value([1.0, 1.0], [1.0, 1.0], 1.5), -2.25);
    }

    #[test]
    fn point_dead_ahead_has_no_lateral_term() {
        let s = VehicleState::new(0.0, 0.0, 4.0, 0.0);
        let d = derivative_coeffs(&s, [10.0, 0.0]);
        assert_eq!(d.d_lat, 0.0);
        assert_eq!(d.d_lon, -10.0);
        assert_eq!(d.h_dot, -80.0);
    }

    #[test]
    fn standing_still() {
        let s = VehicleState::new(1.0, 2.0, 0.0, 0.4);
        let d = derivative_coeffs(&s, [4.0, -1.0]);
        assert_eq!(d.h_dot, 0.0);
        assert_eq!(h_ddot(&d, &s, 1.5, 0.3), 2.0 * 1.5 * d.d_lon);
    }

    #[test]
    fn tightening_levels() {
        let p = CbfParams::default();
        let base = 300.0 * 0.1f64.powi(3);
        assert!((tightening(&p, 0.1, 0.5) - base * 2.0).abs() < 1e-12);
        assert_eq!(tightening(&CbfParams { c_w: 0.0, ..p.clone() }, 0.1, 0.9), base);
        assert!((tightening(&p, 0.1, 1.0) - base * 3.0).abs() < 1e-12);
    }

    #[test]
    fn row_count_and_sentinels() {
        let ego = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        let prox = closest_points(&ego, &[], &[], 5, 4);
        let rows = assemble(&ego, &prox, &CbfParams::default(), 0.1, 0.5);
        assert_eq!(rows.len(), 19);
        assert!(rows.iter().all(|r| r.residual(0.0, 0.0) > 0.0));
        assert_eq!(rows.iter().filter(|r| r.kind == RowKind::Road).count(), 4);
    }
}
