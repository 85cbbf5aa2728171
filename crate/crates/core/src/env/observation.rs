//! Flat observation vector: ego block, SV blocks, waypoints, task one-hot.
//!
//! Ego position and headings are in the ground frame; everything relative to the
//! ego is rotated into the ego's body frame.

use super::Env;
use crate::dynamics::dist;
use crate::nn::encoder::{EGO_DIM, SV_DIM};

pub fn build_observation(env: &Env) -> Vec<f64> {
    let cfg = &env.config;
    let layout = cfg.layout();
    let mut obs = Vec::with_capacity(layout.dim());
    let ego = &env.ego;
    let (sin, cos) = ego.phi.sin_cos();
    let body = |dx: f64, dy: f64| [cos * dx + sin * dy, -sin * dx + cos * dy];
    let [vx, vy] = ego.velocity();
    let prox = env.proximity(0, 0);
    let cap = cfg.obs_distance_cap;
    obs.extend_from_slice(&[
        1.0,
        ego.x,
        ego.y,
        ego.v,
        0.0,
        ego.phi,
        env.yaw_rate(),
        prox.d_veh.min(cap),
        prox.d_road.min(cap),
        env.distance_to_goal(),
    ]);
    debug_assert_eq!(obs.len(), EGO_DIM);

    let mut order: Vec<(f64, usize)> = env
        .svs
        .iter()
        .enumerate()
        .map(|(i, s)| (dist(s.state.position(), ego.position()), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for k in 0..cfg.n_obs_sv {
        match order.get(k) {
            Some(&(_, i)) => {
                let s = &env.svs[i].state;
                let [svx, svy] = s.velocity();
                let [dx, dy] = body(s.x - ego.x, s.y - ego.y);
                let [dvx, dvy] = body(svx - vx, svy - vy);
                obs.extend_from_slice(&[1.0, dx, dy, dvx, dvy, s.phi]);
            }
            None => obs.extend_from_slice(&[0.0; SV_DIM]),
        }
    }

    let route = &env.map.routes[env.ego_routes[env.primary_route()]];
    let s0 = route.project(ego.position()).s;
    for k in 0..cfg.n_wp {
        let w = route.sample(s0 + k as f64 * cfg.wp_spacing);
        obs.extend_from_slice(&body(w.x - ego.x, w.y - ego.y));
    }
    obs.extend_from_slice(&env.task.one_hot());
    debug_assert_eq!(obs.len(), layout.dim());
    obs
}
