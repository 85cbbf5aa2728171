//! Surrounding-vehicle behaviour: IDM car following, two-second conflict
//! prediction with priority yielding, and pure-pursuit route tracking.

use serde::{Deserialize, Serialize};

use super::map::{IntersectionMap, Route};
use crate::dynamics::{bicycle_step, dist, envelope, wrap_angle, CircleEnvelope, ControlCommand, VehicleState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    pub v0: f64,
    pub time_headway: f64,
    pub s0: f64,
    pub a_max: f64,
    pub b_comfort: f64,
    pub exponent: f64,
    pub b_yield: f64,
    /// Output clamp.
    pub a_min: f64,
    /// Prediction horizon of the yielding rule (s).
    pub horizon: f64,
    /// Lateral distance from an SV's route within which a vehicle may be its leader.
    pub leader_band: f64,
    pub max_steer: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            v0: 8.0,
            time_headway: 1.5,
            s0: 2.0,
            a_max: 3.0,
            b_comfort: 5.0,
            exponent: 4.0,
            b_yield: 4.0,
            a_min: -5.0,
            horizon: 2.0,
            leader_band: 2.0,
            max_steer: 0.6,
        }
    }
}

/// IDM acceleration; `leader` is `(bumper gap, leader speed)`.
pub fn idm_accel(p: &IdmParams, v: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / p.v0).powf(p.exponent);
    let a = match leader {
        None => p.a_max * free,
        Some((gap, vl)) => {
            let dv = v - vl;
            let s_star = p.s0 + (v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b_comfort).sqrt())).max(0.0);
            let gap = gap.max(1e-6);
            p.a_max * (free - (s_star / gap).powi(2))
        }
    };
    a.clamp(p.a_min, p.a_max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sv {
    pub id: usize,
    pub state: VehicleState,
    pub route: usize,
    pub s: f64,
    pub yielding: bool,
}

/// A vehicle as seen by the traffic rules.
#[derive(Clone, Debug)]
pub struct Agent<'a> {
    pub id: usize,
    pub state: VehicleState,
    pub route: &'a Route,
    pub s: f64,
}

pub const PREDICTION_SAMPLES: usize = 8;

/// Constant-speed route-following prediction at `k·horizon/PREDICTION_SAMPLES`, k = 0..=N.
pub fn predict(agent: &Agent<'_>, speed: f64, horizon: f64) -> Vec<CircleEnvelope> {
    (0..=PREDICTION_SAMPLES)
        .map(|k| {
            let t = horizon * k as f64 / PREDICTION_SAMPLES as f64;
            if k == 0 {
                return envelope(&agent.state);
            }
            let w = agent.route.sample(agent.s + speed * t);
            envelope(&VehicleState {
                x: w.x,
                y: w.y,
                phi: w.phi,
                ..agent.state
            })
        })
        .collect()
}

/// First sample at which two predictions overlap and the conflict point there.
fn first_conflict(a: &[CircleEnvelope], b: &[CircleEnvelope]) -> Option<(usize, [f64; 2])> {
    for (k, (ea, eb)) in a.iter().zip(b).enumerate() {
        for p in ea.centers {
            for q in eb.centers {
                if dist(p, q) < ea.radius + eb.radius {
                    return Some((k, [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0]));
                }
            }
        }
    }
    None
}

fn arrival_index(pred: &[CircleEnvelope], c: [f64; 2]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, e) in pred.iter().enumerate() {
        let d = dist(e.centers[1], c);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Whether `me` must yield to any of `others` over the prediction horizon.
///
/// Same-direction traffic (heading difference below 30°) is left to car following.
/// Yield to strictly higher priority; on equal priority the earlier arrival at the
/// conflict point passes, then the lower id.
pub fn yield_decision(me: &Agent<'_>, others: &[Agent<'_>], p: &IdmParams) -> bool {
    let mine = predict(me, me.state.v.max(3.0), p.horizon);
    others.iter().any(|o| {
        if o.id == me.id {
            return false;
        }
        if wrap_angle(o.state.phi - me.state.phi).abs() < std::f64::consts::PI / 6.0 {
            return false;
        }
        let (pm, po) = (me.route.priority(), o.route.priority());
        if po < pm {
            return false;
        }
        let theirs = predict(o, o.state.v, p.horizon);
        let Some((_, c)) = first_conflict(&mine, &theirs) else {
            return false;
        };
        if po > pm {
            return true;
        }
        let (ti, tj) = (arrival_index(&mine, c), arrival_index(&theirs, c));
        tj < ti || (tj == ti && o.id < me.id)
    })
}

/// Nearest vehicle ahead of `me` on its route, as `(bumper gap, speed along route)`.
pub fn find_leader(me: &Agent<'_>, others: &[Agent<'_>], p: &IdmParams, lookahead: f64) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for o in others {
        if o.id == me.id || dist(me.state.position(), o.state.position()) > lookahead + 10.0 {
            continue;
        }
        let proj = me.route.project(o.state.position());
        let ds = proj.s - me.s;
        if ds <= 0.0 || ds > lookahead || proj.lateral.abs() > p.leader_band + o.state.width / 2.0 {
            continue;
        }
        let gap = ds - (me.state.length + o.state.length) / 2.0;
        let v_along = o.state.v * wrap_angle(o.state.phi - proj.phi).cos();
        if best.map_or(true, |b| gap < b.0) {
            best = Some((gap, v_along.max(0.0)));
        }
    }
    best
}

/// Pure-pursuit steering toward the route point one lookahead distance ahead.
pub fn pursuit_steer(state: &VehicleState, route: &Route, s: f64, max_steer: f64) -> f64 {
    let ld = (0.8 * state.v).max(4.0);
    let target = route.sample(s + ld);
    let alpha = wrap_angle((target.y - state.y).atan2(target.x - state.x) - state.phi);
    let d = dist(state.position(), [target.x, target.y]).max(1e-6);
    (2.0 * state.wheelbase * alpha.sin() / d).atan().clamp(-max_steer, max_steer)
}

/// Advances every SV by one simulation step. `ego` participates in leader and yield
/// checks but is not moved here. SVs past the end of their route are removed.
pub fn step_svs(map: &IntersectionMap, svs: &mut Vec<Sv>, ego: &Agent<'_>, p: &IdmParams, dt: f64) {
    let snapshot: Vec<(usize, VehicleState, usize, f64)> =
        svs.iter().map(|s| (s.id, s.state, s.route, s.s)).collect();
    let mut agents: Vec<Agent<'_>> = snapshot
        .iter()
        .map(|&(id, state, r, s)| Agent {
            id,
            state,
            route: &map.routes[r],
            s,
        })
        .collect();
    agents.push(ego.clone());
    for sv in svs.iter_mut() {
        let me = agents.iter().find(|a| a.id == sv.id).unwrap();
        let leader = find_leader(me, &agents, p, 40.0);
        let mut a = idm_accel(p, sv.state.v, leader);
        sv.yielding = yield_decision(me, &agents, p);
        if sv.yielding {
            a = a.min(-p.b_yield);
        }
        let route = &map.routes[sv.route];
        let delta = pursuit_steer(&sv.state, route, sv.s, p.max_steer);
        sv.state = bicycle_step(&sv.state, ControlCommand::new(a, delta), dt);
        sv.s = route.project(sv.state.position()).s;
    }
    svs.retain(|sv| sv.s < map.routes[sv.route].length() - 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_road_equilibrium() {
        let p = IdmParams::default();
        assert!(idm_accel(&p, 8.0, None).abs() < 1e-12);
        assert_eq!(idm_accel(&p, 0.0, None), 3.0);
    }

    #[test]
    fn vanishing_gap_brakes_hard() {
        let p = IdmParams::default();
        assert_eq!(idm_accel(&p, 5.0, Some((1e-4, 0.0))), p.a_min);
    }

    #[test]
    fn formula_recomputation() {
        let p = IdmParams::default();
        let s_star = 2.0 + 6.0 * 1.5 + 6.0 * (6.0 - 8.0) / (2.0 * 15f64.sqrt());
        let expected = 3.0 * (1.0 - (6.0f64 / 8.0).powi(4) - (s_star / 20.0).powi(2));
        assert!((idm_accel(&p, 6.0, Some((20.0, 8.0))) - expected).abs() < 1e-12);
    }
}
