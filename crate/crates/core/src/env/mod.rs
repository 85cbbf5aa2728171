//! Unsignalized intersection simulator.

pub mod map;
pub mod observation;
pub mod reward;
pub mod traffic;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use map::{IntersectionMap, MapConfig, Route, Task};
pub use reward::RewardBreakdown;
pub use traffic::{IdmParams, Sv};

use crate::dynamics::{
    bicycle_step, closest_points, dist, envelope, envelope_clearance, ActionBounds, CircleEnvelope,
    ControlCommand, Proximity, SimClock, VehicleState,
};
use crate::error::{Error, Result};
use crate::nn::ObsLayout;
use reward::{compute_reward, RewardInputs, TrackState};
use traffic::Agent;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleGeometry {
    pub length: f64,
    pub width: f64,
    pub wheelbase: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        Self {
            length: 5.0,
            width: 2.0,
            wheelbase: 2.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub map: MapConfig,
    pub vehicle: VehicleGeometry,
    pub n_sv: usize,
    pub sv_speed: [f64; 2],
    pub ego_speed: [f64; 2],
    /// Minimum envelope clearance between the ego and any SV at reset.
    pub ego_clearance: f64,
    /// Ego start is drawn uniformly within this arc length from the route start.
    pub ego_start_span: f64,
    pub idm: IdmParams,
    pub sim_hz: f64,
    pub policy_hz: f64,
    pub bounds: ActionBounds,
    /// Observed SV blocks.
    pub n_obs_sv: usize,
    pub n_wp: usize,
    pub wp_spacing: f64,
    pub horizon: usize,
    pub v_ref: f64,
    /// Cap applied to d_veh and d_road in the observation.
    pub obs_distance_cap: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            map: MapConfig::default(),
            vehicle: VehicleGeometry::default(),
            n_sv: 10,
            sv_speed: [6.0, 10.0],
            ego_speed: [5.0, 8.0],
            ego_clearance: 10.0,
            ego_start_span: 20.0,
            idm: IdmParams::default(),
            sim_hz: 15.0,
            policy_hz: 5.0,
            bounds: ActionBounds::default(),
            n_obs_sv: 10,
            n_wp: 10,
            wp_spacing: 2.0,
            horizon: 200,
            v_ref: 8.0,
            obs_distance_cap: 50.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        SimClock::new(self.sim_hz, self.policy_hz)?;
        self.bounds.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.sv_speed[0] >= 0.0 && self.sv_speed[0] <= self.sv_speed[1]) {
            return bad("sv_speed must be an ordered nonnegative range");
        }
        if !(self.ego_speed[0] >= 0.0 && self.ego_speed[0] <= self.ego_speed[1]) {
            return bad("ego_speed must be an ordered nonnegative range");
        }
        if self.map.goal_distance + self.map.goal_radius >= self.map.approach_length {
            return bad("goal must lie on the exit road");
        }
        if self.ego_start_span < 0.0 || self.ego_start_span > self.map.approach_length {
            return bad("ego_start_span must lie within the approach");
        }
        if self.horizon == 0 || self.n_wp == 0 {
            return bad("horizon and n_wp must be positive");
        }
        if self.vehicle.wheelbase > self.vehicle.length || self.vehicle.width <= 0.0 {
            return bad("vehicle geometry");
        }
        Ok(())
    }

    pub fn clock(&self) -> SimClock {
        SimClock::new(self.sim_hz, self.policy_hz).expect("validated clock")
    }

    pub fn layout(&self) -> ObsLayout {
        ObsLayout {
            n_sv: self.n_obs_sv,
            n_wp: self.n_wp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Collision,
    Frozen,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Events {
    pub collision: bool,
    pub arrival: bool,
    /// Collision cause flags.
    pub hit_vehicle: bool,
    pub hit_road: bool,
    pub off_map: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub d_veh: f64,
    pub d_road: f64,
    pub events: Events,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: RewardBreakdown,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

impl StepOutcome {
    pub fn outcome(&self) -> Option<Outcome> {
        if self.info.events.collision {
            Some(Outcome::Collision)
        } else if self.info.events.arrival {
            Some(Outcome::Success)
        } else if self.truncated {
            Some(Outcome::Frozen)
        } else {
            None
        }
    }
}

pub const EGO_ID: usize = 0;

#[derive(Clone, Debug)]
pub struct Env {
    pub config: EnvConfig,
    pub map: IntersectionMap,
    clock: SimClock,
    rng: ChaCha8Rng,
    pub ego: VehicleState,
    pub task: Task,
    /// The two reference routes of the ego, ordered by exit lane.
    pub ego_routes: [usize; 2],
    pub svs: Vec<Sv>,
    pub step_count: usize,
    pub last_command: ControlCommand,
    done: bool,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let map = IntersectionMap::new(config.map);
        let clock = config.clock();
        let ego = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        Ok(Self {
            config,
            map,
            clock,
            rng: ChaCha8Rng::seed_from_u64(0),
            ego,
            task: Task::Gs,
            ego_routes: [0, 1],
            svs: Vec::new(),
            step_count: 0,
            last_command: ControlCommand::default(),
            done: true,
        })
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn vehicle(&self, x: f64, y: f64, v: f64, phi: f64) -> VehicleState {
        let g = self.config.vehicle;
        VehicleState {
            length: g.length,
            width: g.width,
            wheelbase: g.wheelbase,
            ..VehicleState::new(x, y, v, phi)
        }
    }

    pub fn reset(&mut self, seed: u64, task: Option<Task>) -> Result<Vec<f64>> {
        for attempt in 0..2u64 {
            let stream_seed = if attempt == 0 { seed } else { seed ^ 0x5eed_5eed_5eed_5eed };
            self.rng = ChaCha8Rng::seed_from_u64(stream_seed);
            if self.try_place(task) {
                self.step_count = 0;
                self.last_command = ControlCommand::default();
                self.done = false;
                return Ok(self.observe());
            }
        }
        Err(Error::Placement(format!(
            "could not place {} surrounding vehicles for seed {seed}",
            self.config.n_sv
        )))
    }

    fn try_place(&mut self, task: Option<Task>) -> bool {
        let task = task.unwrap_or_else(|| Task::ALL[self.rng.gen_range(0..3)]);
        let arm = self.rng.gen_range(0..4);
        let lanes = IntersectionMap::entry_lanes(task);
        let lane = lanes[self.rng.gen_range(0..lanes.len())];
        let ids = self.map.routes_for(arm, task, lane);
        self.task = task;
        self.ego_routes = [ids[0], ids[1]];
        let s0 = self.rng.gen_range(0.0..=self.config.ego_start_span);
        let v0 = self.rng.gen_range(self.config.ego_speed[0]..=self.config.ego_speed[1]);
        let w = self.map.routes[ids[0]].sample(s0);
        self.ego = self.vehicle(w.x, w.y, v0, w.phi);
        let ego_env = envelope(&self.ego);

        self.svs.clear();
        let n_routes = self.map.routes.len();
        for k in 0..self.config.n_sv {
            let mut placed = false;
            for _ in 0..100 {
                let r = self.rng.gen_range(0..n_routes);
                let route = &self.map.routes[r];
                let s = self.rng.gen_range(0.0..route.length() * 0.6);
                let v = self.rng.gen_range(self.config.sv_speed[0]..=self.config.sv_speed[1]);
                let w = route.sample(s);
                let st = self.vehicle(w.x, w.y, v, w.phi);
                let env = envelope(&st);
                if envelope_clearance(&env, &ego_env) < self.config.ego_clearance {
                    continue;
                }
                if self
                    .svs
                    .iter()
                    .any(|o| envelope_clearance(&envelope(&o.state), &env) < 2.0)
                {
                    continue;
                }
                self.svs.push(Sv {
                    id: k + 1,
                    state: st,
                    route: r,
                    s,
                    yielding: false,
                });
                placed = true;
                break;
            }
            if !placed {
                return false;
            }
        }
        true
    }

    /// Index into `ego_routes` of the route the ego currently tracks best.
    pub fn primary_route(&self) -> usize {
        let p = self.ego.position();
        let l0 = self.map.routes[self.ego_routes[0]].project(p).lateral.abs();
        let l1 = self.map.routes[self.ego_routes[1]].project(p).lateral.abs();
        if l1 + 1e-9 < l0 {
            1
        } else {
            0
        }
    }

    pub fn sv_envelopes(&self) -> Vec<CircleEnvelope> {
        self.svs.iter().map(|s| envelope(&s.state)).collect()
    }

    pub fn proximity(&self, n_points: usize, m_points: usize) -> Proximity {
        closest_points(&self.ego, &self.sv_envelopes(), &self.map.boundaries, n_points, m_points)
    }

    pub fn distance_to_goal(&self) -> f64 {
        self.ego_routes
            .iter()
            .map(|&r| dist(self.ego.position(), self.map.routes[r].goal))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn observe(&self) -> Vec<f64> {
        observation::build_observation(self)
    }

    fn events(&self) -> (Events, f64, f64) {
        let prox = self.proximity(0, 0);
        let mut e = Events {
            hit_vehicle: prox.d_veh < 0.0,
            hit_road: prox.d_road < 0.0,
            off_map: !self.map.contains(self.ego.position()),
            ..Events::default()
        };
        e.collision = e.hit_vehicle || e.hit_road || e.off_map;
        e.arrival = !e.collision
            && self
                .ego_routes
                .iter()
                .any(|&r| self.map.routes[r].in_goal(self.ego.position()));
        (e, prox.d_veh, prox.d_road)
    }

    pub fn step(&mut self, u: ControlCommand) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        if !(u.a_lon.is_finite() && u.delta.is_finite()) {
            return Err(Error::NonFinite(format!("action {u:?}")));
        }
        let u = self.config.bounds.clamp(u);
        let dt = self.clock.dt();
        let mut ev = Events::default();
        let (mut d_veh, mut d_road) = (f64::INFINITY, f64::INFINITY);
        for _ in 0..self.clock.substeps() {
            let route = &self.map.routes[self.ego_routes[self.primary_route()]];
            let ego_agent = Agent {
                id: EGO_ID,
                state: self.ego,
                route,
                s: route.project(self.ego.position()).s,
            };
            let mut svs = std::mem::take(&mut self.svs);
            traffic::step_svs(&self.map, &mut svs, &ego_agent, &self.config.idm, dt);
            self.svs = svs;
            self.ego = bicycle_step(&self.ego, u, dt);
            (ev, d_veh, d_road) = self.events();
            if ev.collision || ev.arrival {
                break;
            }
        }
        self.step_count += 1;
        let terminated = ev.collision || ev.arrival;
        let truncated = !terminated && self.step_count >= self.config.horizon;
        self.done = terminated || truncated;
        let reward = self.reward(u, d_veh, &ev);
        self.last_command = u;
        Ok(StepOutcome {
            observation: self.observe(),
            reward,
            terminated,
            truncated,
            info: StepInfo {
                d_veh,
                d_road,
                events: ev,
                step: self.step_count,
            },
        })
    }

    /// Yaw rate implied by the last applied command.
    pub fn yaw_rate(&self) -> f64 {
        self.ego.v * self.last_command.delta.tan() / self.ego.wheelbase
    }

    fn reward(&self, u: ControlCommand, d_veh: f64, ev: &Events) -> RewardBreakdown {
        let omega = self.ego.v * u.delta.tan() / self.ego.wheelbase;
        let state: TrackState = [self.ego.x, self.ego.y, self.ego.v, 0.0, self.ego.phi, omega];
        let refs: Vec<TrackState> = self
            .ego_routes
            .iter()
            .map(|&r| {
                let p = self.map.routes[r].project(self.ego.position());
                [p.point[0], p.point[1], self.config.v_ref, 0.0, p.phi, 0.0]
            })
            .collect();
        let primary = &self.map.routes[self.ego_routes[self.primary_route()]];
        let scale = primary.project(primary.goal).s.max(1.0);
        compute_reward(&RewardInputs {
            state,
            references: &refs,
            u,
            u_prev: self.last_command,
            bounds: self.config.bounds,
            d_des: self.distance_to_goal(),
            d_des_scale: scale,
            d_veh,
            collision: ev.collision,
            arrival: ev.arrival,
        })
    }

    /// Places the ego at an explicit pose; used by scenario tests.
    pub fn set_ego(&mut self, state: VehicleState) {
        self.ego = state;
    }
}
