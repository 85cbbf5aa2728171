//! Kinematic bicycle model, three-circle envelopes and clearance queries.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub phi: f64,
    /// Body length L_v.
    pub length: f64,
    /// Body width W_v.
    pub width: f64,
    /// Wheelbase L.
    pub wheelbase: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, v: f64, phi: f64) -> Self {
        Self {
            x,
            y,
            v,
            phi: wrap_angle(phi),
            length: 5.0,
            width: 2.0,
            wheelbase: 2.5,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.v * self.phi.cos(), self.v * self.phi.sin()]
    }

    /// Rectangle corners, counter-clockwise from rear-right.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.phi.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)]
            .map(|(lx, ly)| [self.x + lx * c - ly * s, self.y + lx * s + ly * c])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub a_lon: f64,
    pub delta: f64,
}

impl ControlCommand {
    pub fn new(a_lon: f64, delta: f64) -> Self {
        Self { a_lon, delta }
    }
}

/// Box bounds on the control command.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBounds {
    pub a_min: f64,
    pub a_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self {
            a_min: -5.0,
            a_max: 3.0,
            delta_min: -0.4,
            delta_max: 0.4,
        }
    }
}

impl ActionBounds {
    pub fn contains(&self, u: ControlCommand, tol: f64) -> bool {
        u.a_lon >= self.a_min - tol
            && u.a_lon <= self.a_max + tol
            && u.delta >= self.delta_min - tol
            && u.delta <= self.delta_max + tol
    }

    pub fn clamp(&self, u: ControlCommand) -> ControlCommand {
        ControlCommand {
            a_lon: u.a_lon.clamp(self.a_min, self.a_max),
            delta: u.delta.clamp(self.delta_min, self.delta_max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.a_min < self.a_max
            && self.delta_min < self.delta_max
            && self.delta_min > -PI / 2.0
            && self.delta_max < PI / 2.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid action bounds {self:?}")))
        }
    }
}

/// Simulation step and policy period.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimClock {
    pub sim_hz: f64,
    pub policy_hz: f64,
}

impl SimClock {
    pub fn new(sim_hz: f64, policy_hz: f64) -> Result<Self> {
        let clock = Self { sim_hz, policy_hz };
        let ratio = sim_hz / policy_hz;
        if !(sim_hz > 0.0 && policy_hz > 0.0) || (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::Config(format!(
                "policy period must be an integer multiple of the simulation step ({sim_hz} Hz / {policy_hz} Hz)"
            )));
        }
        Ok(clock)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sim_hz
    }

    pub fn policy_dt(&self) -> f64 {
        1.0 / self.policy_hz
    }

    pub fn substeps(&self) -> usize {
        (self.sim_hz / self.policy_hz).round() as usize
    }
}

/// Wraps to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// One explicit-Euler step of the kinematic bicycle model.
pub fn bicycle_step(s: &VehicleState, u: ControlCommand, dt: f64) -> VehicleState {
    let (sin, cos) = s.phi.sin_cos();
    VehicleState {
        x: s.x + dt * s.v * cos,
        y: s.y + dt * s.v * sin,
        v: (s.v + dt * u.a_lon).max(0.0),
        phi: wrap_angle(s.phi + dt * s.v * u.delta.tan() / s.wheelbase),
        ..*s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleEnvelope {
    pub centers: [[f64; 2]; 3],
    pub radius: f64,
}

pub const ENVELOPE_MARGIN: f64 = 1.05;

pub fn envelope_radius(length: f64, width: f64) -> f64 {
    ENVELOPE_MARGIN * ((length / 6.0).powi(2) + (width / 2.0).powi(2)).sqrt()
}

pub fn envelope(s: &VehicleState) -> CircleEnvelope {
    let (sin, cos) = s.phi.sin_cos();
    let off = s.length / 3.0;
    let centers = [-off, 0.0, off].map(|o| [s.x + o * cos, s.y + o * sin]);
    CircleEnvelope {
        centers,
        radius: envelope_radius(s.length, s.width),
    }
}

#[inline]
pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Closest point to `p` on segment `a`–`b`.
pub fn project_on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    if len2 == 0.0 {
        return a;
    }
    let t = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
    [a[0] + t * d[0], a[1] + t * d[1]]
}

/// Closest point to `p` on an open polyline.
pub fn project_on_polyline(p: [f64; 2], line: &[[f64; 2]]) -> [f64; 2] {
    match line.len() {
        0 => [f64::INFINITY, f64::INFINITY],
        1 => line[0],
        _ => {
            let mut best = line[0];
            let mut best_d = f64::INFINITY;
            for w in line.windows(2) {
                let q = project_on_segment(p, w[0], w[1]);
                let d = dist(p, q);
                if d < best_d {
                    best_d = d;
                    best = q;
                }
            }
            best
        }
    }
}

/// An obstacle circle selected for the barrier rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstaclePoint {
    pub center: [f64; 2],
    pub radius: f64,
    /// Envelope clearance to the nearest ego circle.
    pub clearance: f64,
    pub sentinel: bool,
}

/// A road-boundary point selected for the barrier rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub point: [f64; 2],
    pub clearance: f64,
    pub sentinel: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proximity {
    pub d_veh: f64,
    pub d_road: f64,
    pub obstacles: Vec<ObstaclePoint>,
    pub boundary: Vec<BoundaryPoint>,
}

/// Distance at which padding points are placed.
pub const SENTINEL_DISTANCE: f64 = 1000.0;

/// Clearance queries between the ego envelope, other envelopes and the road boundary.
///
/// Obstacle candidates are individual circles of other vehicles; boundary candidates
/// are the nearest point of each polyline. Both lists are sorted by clearance and
/// padded with far points behind the ego.
pub fn closest_points(
    ego: &VehicleState,
    others: &[CircleEnvelope],
    road: &[Vec<[f64; 2]>],
    n_points: usize,
    m_points: usize,
) -> Proximity {
    let ego_env = envelope(ego);
    let r_ego = ego_env.radius;
    let mut obstacles = Vec::with_capacity(others.len() * 3);
    for env in others {
        for c in env.centers {
            let clearance = ego_env
                .centers
                .iter()
                .map(|e| dist(*e, c) - r_ego - env.radius)
                .fold(f64::INFINITY, f64::min);
            obstacles.push(ObstaclePoint {
                center: c,
                radius: env.radius,
                clearance,
                sentinel: false,
            });
        }
    }
    obstacles.sort_by(|a, b| a.clearance.total_cmp(&b.clearance));
    let d_veh = obstacles.first().map_or(f64::INFINITY, |o| o.clearance);

    let mut boundary = Vec::with_capacity(road.len());
    for line in road {
        if line.is_empty() {
            continue;
        }
        let mut best: Option<BoundaryPoint> = None;
        for e in ego_env.centers {
            let q = project_on_polyline(e, line);
            let clearance = dist(e, q) - r_ego;
            if best.map_or(true, |b| clearance < b.clearance) {
                best = Some(BoundaryPoint {
                    point: q,
                    clearance,
                    sentinel: false,
                });
            }
        }
        boundary.extend(best);
    }
    boundary.sort_by(|a, b| a.clearance.total_cmp(&b.clearance));
    let d_road = boundary.first().map_or(f64::INFINITY, |b| b.clearance);

    let (sin, cos) = ego.phi.sin_cos();
    let far = [
        ego.x - SENTINEL_DISTANCE * cos,
        ego.y - SENTINEL_DISTANCE * sin,
    ];
    obstacles.truncate(n_points);
    while obstacles.len() < n_points {
        obstacles.push(ObstaclePoint {
            center: far,
            radius: r_ego,
            clearance: SENTINEL_DISTANCE,
            sentinel: true,
        });
    }
    boundary.truncate(m_points);
    while boundary.len() < m_points {
        boundary.push(BoundaryPoint {
            point: far,
            clearance: SENTINEL_DISTANCE,
            sentinel: true,
        });
    }
    Proximity {
        d_veh,
        d_road,
        obstacles,
        boundary,
    }
}

/// Minimum envelope clearance between two vehicles.
pub fn envelope_clearance(a: &CircleEnvelope, b: &CircleEnvelope) -> f64 {
    let mut best = f64::INFINITY;
    for p in a.centers {
        for q in b.centers {
            best = best.min(dist(p, q) - a.radius - b.radius);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resting_vehicle_stays_put() {
        let s = VehicleState::new(1.0, 2.0, 0.0, 0.3);
        for d in [-0.4, 0.0, 0.4] {
            assert_eq!(bicycle_step(&s, ControlCommand::new(0.0, d), 1.0 / 15.0), s);
        }
    }

    #[test]
    fn straight_line_advance() {
        let s = VehicleState::new(0.0, 0.0, 10.0, 0.0);
        let n = bicycle_step(&s, ControlCommand::default(), 1.0 / 15.0);
        assert!((n.x - 10.0 / 15.0).abs() < 1e-15);
        assert_eq!(n.y, 0.0);
        assert_eq!(n.v, 10.0);
        assert_eq!(n.phi, 0.0);
    }

    #[test]
    fn turning_step_matches_scalar_recomputation() {
        let s = VehicleState::new(3.0, -1.0, 5.0, 0.7);
        let dt = 1.0 / 15.0;
        let n = bicycle_step(&s, ControlCommand::new(1.2, 0.1), dt);
        assert!((n.x - (3.0 + dt * 5.0 * 0.7f64.cos())).abs() < 1e-15);
        assert!((n.y - (-1.0 + dt * 5.0 * 0.7f64.sin())).abs() < 1e-15);
        assert!((n.v - (5.0 + dt * 1.2)).abs() < 1e-15);
        assert!((n.phi - (0.7 + dt * 5.0 * 0.1f64.tan() / 2.5)).abs() < 1e-15);
    }

    #[test]
    fn speed_clamps_at_zero() {
        let s = VehicleState::new(0.0, 0.0, 0.1, 0.0);
        assert_eq!(bicycle_step(&s, ControlCommand::new(-5.0, 0.0), 0.1).v, 0.0);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_closed_form() {
        let s = VehicleState::new(1.0, 1.0, 0.0, 0.0);
        let e = envelope(&s);
        assert!((e.centers[0][0] - (1.0 - 5.0 / 3.0)).abs() < 1e-15);
        assert!((e.centers[2][0] - (1.0 + 5.0 / 3.0)).abs() < 1e-15);
        assert!((e.radius - 1.05 * (25.0f64 / 36.0 + 1.0).sqrt()).abs() < 1e-15);
        let up = envelope(&VehicleState::new(0.0, 0.0, 0.0, PI / 2.0));
        assert!(up.centers[2][1] > 1.6 && up.centers[2][0].abs() < 1e-12);
        assert!((envelope_radius(5.0, 0.0) - 1.05 * 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn clock_requires_integer_ratio() {
        assert_eq!(SimClock::new(15.0, 5.0).unwrap().substeps(), 3);
        assert!(SimClock::new(15.0, 10.0).is_err());
        assert_eq!(SimClock::new(30.0, 10.0).unwrap().substeps(), 3);
    }

    #[test]
    fn padding_and_ordering() {
        let ego = VehicleState::new(0.0, 0.0, 5.0, 0.0);
        let p = closest_points(&ego, &[], &[], 5, 4);
        assert_eq!(p.obstacles.len(), 5);
        assert!(p.obstacles.iter().all(|o| o.sentinel));
        assert_eq!(p.boundary.len(), 4);
        assert_eq!(p.d_veh, f64::INFINITY);
    }
}
