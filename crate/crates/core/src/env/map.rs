//! Four-arm, two-lanes-per-direction intersection geometry and routes.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::dynamics::{dist, project_on_segment, wrap_angle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lt,
    Gs,
    Rt,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Lt, Task::Gs, Task::Rt];

    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Task::Lt => [1.0, 0.0, 0.0],
            Task::Gs => [0.0, 1.0, 0.0],
            Task::Rt => [0.0, 0.0, 1.0],
        }
    }

    /// Right of way rank: right turns over straight over left turns.
    pub fn priority(self) -> u8 {
        match self {
            Task::Rt => 2,
            Task::Gs => 1,
            Task::Lt => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Lt => "lt",
            Task::Gs => "gs",
            Task::Rt => "rt",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s.to_ascii_lowercase().as_str() {
            "lt" => Some(Task::Lt),
            "gs" => Some(Task::Gs),
            "rt" => Some(Task::Rt),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    /// Arc length from the route start.
    pub s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub point: [f64; 2],
    pub phi: f64,
    /// Signed offset, positive to the left of the travel direction.
    pub lateral: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub task: Task,
    /// Entry arm index; arm `k` travels with heading `k·π/2`.
    pub arm: usize,
    /// 0 = inner lane, 1 = outer lane.
    pub entry_lane: usize,
    pub exit_lane: usize,
    pub waypoints: Vec<Waypoint>,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    /// Arc length at which the route leaves the approach road.
    pub entry_end_s: f64,
}

impl Route {
    pub fn length(&self) -> f64 {
        self.waypoints.last().map_or(0.0, |w| w.s)
    }

    pub fn priority(&self) -> u8 {
        self.task.priority()
    }

    /// Pose on the centerline at arc length `s` (clamped to the route).
    pub fn sample(&self, s: f64) -> Waypoint {
        let w = &self.waypoints;
        let s = s.clamp(0.0, self.length());
        let i = w.partition_point(|p| p.s <= s).clamp(1, w.len() - 1);
        let (a, b) = (w[i - 1], w[i]);
        let t = if b.s > a.s { (s - a.s) / (b.s - a.s) } else { 0.0 };
        Waypoint {
            x: a.x + t * (b.x - a.x),
            y: a.y + t * (b.y - a.y),
            phi: a.phi,
            s,
        }
    }

    pub fn project(&self, p: [f64; 2]) -> Projection {
        let w = &self.waypoints;
        let mut best = (f64::INFINITY, 0usize, [w[0].x, w[0].y]);
        for i in 0..w.len() - 1 {
            let q = project_on_segment(p, [w[i].x, w[i].y], [w[i + 1].x, w[i + 1].y]);
            let d = dist(p, q);
            if d < best.0 {
                best = (d, i, q);
            }
        }
        let (_, i, q) = best;
        let a = w[i];
        let s = a.s + dist([a.x, a.y], q);
        let (sin, cos) = a.phi.sin_cos();
        let lateral = -(p[0] - q[0]) * sin + (p[1] - q[1]) * cos;
        Projection {
            s,
            point: q,
            phi: a.phi,
            lateral,
        }
    }

    pub fn in_goal(&self, p: [f64; 2]) -> bool {
        dist(p, self.goal) <= self.goal_radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub lane_width: f64,
    pub approach_length: f64,
    pub goal_radius: f64,
    /// Distance of the goal past the intersection box along the exit road.
    pub goal_distance: f64,
    /// Waypoint spacing of stored centerlines.
    pub resolution: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            lane_width: 4.0,
            approach_length: 60.0,
            goal_radius: 2.0,
            goal_distance: 25.0,
            resolution: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionMap {
    pub config: MapConfig,
    pub routes: Vec<Route>,
    /// Curb polylines, one per quadrant.
    pub boundaries: Vec<Vec<[f64; 2]>>,
}

fn rotate(p: [f64; 2], k: usize) -> [f64; 2] {
    let (s, c) = (k as f64 * FRAC_PI_2).sin_cos();
    let r = [c * p[0] - s * p[1], s * p[0] + c * p[1]];
    // Quarter turns are exact; remove the trigonometric residue.
    [round_tiny(r[0]), round_tiny(r[1])]
}

fn round_tiny(v: f64) -> f64 {
    let r = (v * 1e9).round() / 1e9;
    if (r - v).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn line(a: [f64; 2], b: [f64; 2], step: f64) -> Vec<[f64; 2]> {
    let n = (dist(a, b) / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

/// Quarter ellipse `c + (ax cosθ, by sinθ)` for θ from `t0` to `t1`.
fn quarter(c: [f64; 2], ax: f64, by: f64, t0: f64, t1: f64, n: usize) -> Vec<[f64; 2]> {
    (0..=n)
        .map(|i| {
            let t = t0 + (t1 - t0) * i as f64 / n as f64;
            [c[0] + ax * t.cos(), c[1] + by * t.sin()]
        })
        .collect()
}

fn append(path: &mut Vec<[f64; 2]>, more: Vec<[f64; 2]>) {
    for p in more {
        if path.last().map_or(true, |q| dist(*q, p) > 1e-9) {
            path.push(p);
        }
    }
}

/// Resamples a dense polyline at uniform arc-length spacing.
fn resample(path: &[[f64; 2]], step: f64) -> Vec<Waypoint> {
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    let n = (total / step).ceil() as usize;
    let mut pts = Vec::with_capacity(n + 1);
    let mut j = 0;
    for i in 0..=n {
        let s = (i as f64 * total / n as f64).min(total);
        while j + 2 < cum.len() && cum[j + 1] < s {
            j += 1;
        }
        let seg = cum[j + 1] - cum[j];
        let t = if seg > 0.0 { ((s - cum[j]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        pts.push([
            path[j][0] + t * (path[j + 1][0] - path[j][0]),
            path[j][1] + t * (path[j + 1][1] - path[j][1]),
        ]);
    }
    let mut out = Vec::with_capacity(pts.len());
    let mut s = 0.0;
    for i in 0..pts.len() {
        if i > 0 {
            s += dist(pts[i - 1], pts[i]);
        }
        let (a, b) = if i + 1 < pts.len() { (pts[i], pts[i + 1]) } else { (pts[i - 1], pts[i]) };
        out.push(Waypoint {
            x: pts[i][0],
            y: pts[i][1],
            phi: (b[1] - a[1]).atan2(b[0] - a[0]),
            s,
        });
    }
    out
}

impl IntersectionMap {
    pub fn new(config: MapConfig) -> Self {
        let mut routes = Vec::new();
        for arm in 0..4 {
            for (task, entry) in [(Task::Lt, 0), (Task::Gs, 0), (Task::Gs, 1), (Task::Rt, 1)] {
                for exit in 0..2 {
                    routes.push(Self::build_route(&config, arm, task, entry, exit));
                }
            }
        }
        let boundaries = (0..4).map(|k| Self::curb(&config, k)).collect();
        Self {
            config,
            routes,
            boundaries,
        }
    }

    pub fn half_width(&self) -> f64 {
        2.0 * self.config.lane_width
    }

    /// Half side of the square map.
    pub fn extent(&self) -> f64 {
        self.half_width() + self.config.approach_length
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let e = self.extent();
        p[0].abs() <= e && p[1].abs() <= e
    }

    pub fn curb_radius(&self) -> f64 {
        1.5 * self.config.lane_width
    }

    /// Routes starting in the given arm and lane for a task, ordered by exit lane.
    pub fn routes_for(&self, arm: usize, task: Task, entry_lane: usize) -> Vec<usize> {
        self.routes
            .iter()
            .enumerate()
            .filter(|(_, r)| r.arm == arm && r.task == task && r.entry_lane == entry_lane)
            .map(|(i, _)| i)
            .collect()
    }

    /// Lane used to enter for a task; straight routes may use either.
    pub fn entry_lanes(task: Task) -> &'static [usize] {
        match task {
            Task::Lt => &[0],
            Task::Gs => &[0, 1],
            Task::Rt => &[1],
        }
    }

    fn build_route(cfg: &MapConfig, arm: usize, task: Task, entry: usize, exit: usize) -> Route {
        let lw = cfg.lane_width;
        let hw = 2.0 * lw;
        let ext = hw + cfg.approach_length;
        let lane = |i: usize| (i as f64 + 0.5) * lw;
        let ye = -lane(entry);
        let rc = 1.5 * lw;
        let mut path = vec![[-ext, ye]];
        let goal;
        let entry_end;
        match task {
            Task::Gs => {
                let yx = -lane(exit);
                entry_end = ext - hw;
                let n = 32;
                let blend: Vec<[f64; 2]> = (0..=n)
                    .map(|i| {
                        let t = i as f64 / n as f64;
                        let w = 0.5 - 0.5 * (PI * t).cos();
                        [-hw + 2.0 * hw * t, ye + (yx - ye) * w]
                    })
                    .collect();
                append(&mut path, blend);
                append(&mut path, vec![[ext, yx]]);
                goal = [hw + cfg.goal_distance, yx];
            }
            Task::Rt => {
                let xx = -lane(exit);
                let c = [-(hw + rc), -(hw + rc)];
                entry_end = ext - (hw + rc);
                append(&mut path, vec![[c[0], ye]]);
                append(
                    &mut path,
                    quarter(c, xx - c[0], ye - c[1], FRAC_PI_2, 0.0, 48),
                );
                append(&mut path, vec![[xx, -ext]]);
                goal = [xx, -(hw + cfg.goal_distance)];
            }
            Task::Lt => {
                let xx = lane(exit);
                let c = [-hw, hw];
                entry_end = ext - hw;
                append(&mut path, vec![[c[0], ye]]);
                append(
                    &mut path,
                    quarter(c, xx - c[0], c[1] - ye, -FRAC_PI_2, 0.0, 64),
                );
                append(&mut path, vec![[xx, ext]]);
                goal = [xx, hw + cfg.goal_distance];
            }
        }
        let path: Vec<[f64; 2]> = path.into_iter().map(|p| rotate(p, arm)).collect();
        let mut waypoints = resample(&path, cfg.resolution);
        for w in &mut waypoints {
            w.phi = wrap_angle(w.phi);
        }
        Route {
            task,
            arm,
            entry_lane: entry,
            exit_lane: exit,
            waypoints,
            goal: rotate(goal, arm),
            goal_radius: cfg.goal_radius,
            entry_end_s: entry_end,
        }
    }

    fn curb(cfg: &MapConfig, k: usize) -> Vec<[f64; 2]> {
        let hw = 2.0 * cfg.lane_width;
        let ext = hw + cfg.approach_length;
        let rc = 1.5 * cfg.lane_width;
        let c = [-(hw + rc), -(hw + rc)];
        let mut pts = line([-ext, -hw], [c[0], -hw], 4.0);
        append(&mut pts, quarter(c, rc, rc, FRAC_PI_2, 0.0, 16));
        append(&mut pts, line([-hw, c[1]], [-hw, -ext], 4.0));
        pts.into_iter().map(|p| rotate(p, k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_route_is_finely_sampled_and_monotone() {
        let map = IntersectionMap::new(MapConfig::default());
        assert_eq!(map.routes.len(), 32);
        for r in &map.routes {
            for w in r.waypoints.windows(2) {
                let d = dist([w[0].x, w[0].y], [w[1].x, w[1].y]);
                assert!(d <= 1.0 && d > 0.0);
                assert!(w[1].s > w[0].s);
                assert!(wrap_angle(w[1].phi - w[0].phi).abs() < 0.2);
            }
            let g = r.project(r.goal);
            assert!(dist(g.point, r.goal) < 1e-6);
            assert!(g.s < r.length() - 5.0);
        }
    }

    #[test]
    fn arm_headings_and_turn_directions() {
        let map = IntersectionMap::new(MapConfig::default());
        for r in &map.routes {
            let first = r.waypoints[0].phi;
            let last = r.waypoints.last().unwrap().phi;
            assert!(wrap_angle(first - r.arm as f64 * FRAC_PI_2).abs() < 1e-6);
            let turn = wrap_angle(last - first);
            let expected = match r.task {
                Task::Lt => FRAC_PI_2,
                Task::Gs => 0.0,
                Task::Rt => -FRAC_PI_2,
            };
            assert!((turn - expected).abs() < 1e-6, "{:?} turned {turn}", r.task);
        }
    }

    #[test]
    fn routes_keep_clear_of_curbs() {
        let map = IntersectionMap::new(MapConfig::default());
        for r in &map.routes {
            for w in &r.waypoints {
                for b in &map.boundaries {
                    let q = crate::dynamics::project_on_polyline([w.x, w.y], b);
                    assert!(dist([w.x, w.y], q) >= 1.9, "{:?} too close to curb", r.task);
                }
            }
        }
    }

    #[test]
    fn projection_recovers_lateral_offset() {
        let map = IntersectionMap::new(MapConfig::default());
        let r = &map.routes[map.routes_for(0, Task::Gs, 0)[0]];
        let p = r.project([-30.0, -1.0]);
        assert!((p.lateral - 1.0).abs() < 1e-9);
        assert!((p.point[1] + 2.0).abs() < 1e-9);
    }
}
