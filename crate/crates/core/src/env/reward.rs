//! Sparse and dense reward terms.

use serde::{Deserialize, Serialize};

use crate::dynamics::{wrap_angle, ActionBounds, ControlCommand};

pub const Q_DIAG: [f64; 6] = [400.0, 400.0, 30.0, 30.0, 2.0, 0.5];
pub const R_U: [f64; 2] = [0.05, 0.02];
pub const R_DELTA: [f64; 2] = [0.2, 0.3];
pub const SPARSE: f64 = 50.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub collision: f64,
    pub arrival: f64,
    /// `3 / (1 + r_ref)`.
    pub reference: f64,
    pub action: f64,
    pub destination: f64,
    pub safety: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn sparse(&self) -> f64 {
        self.collision + self.arrival
    }

    pub fn dense(&self) -> f64 {
        self.reference + self.action + self.destination + self.safety
    }
}

/// Tracking state `[x, y, v_lon, v_lat, φ, ω]`.
pub type TrackState = [f64; 6];

/// Quadratic tracking error with the heading component wrapped.
pub fn tracking_cost(state: &TrackState, reference: &TrackState) -> f64 {
    let mut c = 0.0;
    for i in 0..6 {
        let mut e = reference[i] - state[i];
        if i == 4 {
            e = wrap_angle(e);
        }
        c += Q_DIAG[i] * e * e;
    }
    c
}

/// Piecewise proximity penalty; the 2–5 m band is 0 and both branches are capped at 0.
pub fn safety_penalty(d_veh: f64) -> f64 {
    if d_veh > 2.0 {
        0.0
    } else if d_veh > 0.5 {
        (-(1.0 - d_veh)).min(0.0)
    } else {
        (-3.0 * (1.0 - d_veh)).min(0.0)
    }
}

/// Energy and smoothness penalty on commands scaled by the largest bound magnitude of
/// each channel, so both channels live in [−1, 1].
pub fn action_penalty(u: ControlCommand, u_prev: ControlCommand, bounds: &ActionBounds) -> f64 {
    let sa = bounds.a_min.abs().max(bounds.a_max.abs());
    let sd = bounds.delta_min.abs().max(bounds.delta_max.abs());
    let (a, d) = (u.a_lon / sa, u.delta / sd);
    let da = a - u_prev.a_lon / sa;
    let dd = d - u_prev.delta / sd;
    -(R_U[0] * a * a + R_U[1] * d * d + R_DELTA[0] * da * da + R_DELTA[1] * dd * dd)
}

pub struct RewardInputs<'a> {
    pub state: TrackState,
    /// One tracking reference per reference line; the closest one scores.
    pub references: &'a [TrackState],
    pub u: ControlCommand,
    pub u_prev: ControlCommand,
    pub bounds: ActionBounds,
    pub d_des: f64,
    pub d_des_scale: f64,
    pub d_veh: f64,
    pub collision: bool,
    pub arrival: bool,
}

pub fn compute_reward(inp: &RewardInputs<'_>) -> RewardBreakdown {
    let r_ref = inp
        .references
        .iter()
        .map(|r| tracking_cost(&inp.state, r))
        .fold(f64::INFINITY, f64::min);
    let mut out = RewardBreakdown {
        collision: if inp.collision { -SPARSE } else { 0.0 },
        arrival: if inp.arrival && !inp.collision { SPARSE } else { 0.0 },
        reference: 3.0 / (1.0 + r_ref),
        action: action_penalty(inp.u, inp.u_prev, &inp.bounds),
        destination: -(inp.d_des / inp.d_des_scale).powi(2),
        safety: safety_penalty(inp.d_veh),
        total: 0.0,
    };
    out.total = out.collision + out.arrival + out.reference + out.action + out.destination + out.safety;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safety_branches() {
        assert!((safety_penalty(0.4) + 1.8).abs() < 1e-12);
        assert_eq!(safety_penalty(3.0), 0.0);
        assert_eq!(safety_penalty(6.0), 0.0);
        assert_eq!(safety_penalty(1.5), 0.0);
        assert!((safety_penalty(0.8) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn on_reference_and_idle() {
        let s = [1.0, 2.0, 8.0, 0.0, 0.3, 0.0];
        let r = compute_reward(&RewardInputs {
            state: s,
            references: &[s, s],
            u: ControlCommand::default(),
            u_prev: ControlCommand::default(),
            bounds: ActionBounds::default(),
            d_des: 10.0,
            d_des_scale: 100.0,
            d_veh: 50.0,
            collision: false,
            arrival: false,
        });
        assert_eq!(r.reference, 3.0);
        assert!((r.total - (3.0 - 0.01)).abs() < 1e-12);
    }
}
