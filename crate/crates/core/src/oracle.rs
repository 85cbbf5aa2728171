//! Independent reference computations used by the self-test and acceptance suites.
//!
//! Each routine recomputes a quantity the library produces by a different route:
//! grid search for the filter QP, rollouts for the barrier derivatives, finite
//! differences for network gradients, and a single-critic soft actor-critic step
//! written out without the ensemble machinery.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::distrl::actor::{to_command, ActorNet};
use crate::distrl::agent::{Agent, AgentConfig, StepNoise};
use crate::distrl::critic::{QuantileNet, ACTION_DIM};
use crate::distrl::replay::{Batch, ReplayBuffer, Transition};
use crate::dynamics::{
    bicycle_step, closest_points, envelope, ActionBounds, ControlCommand, VehicleState,
};
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamState, EncoderKind, Matrix, Param, Parameterized};
use crate::safety::{
    assemble, cbf_value, derivative_coeffs, halfspaces, kkt_residuals, solve_filter, CbfParams, ConstraintRow,
    FilterStatus, Halfspace, RowKind, SafetyConfig,
};

// ---------------------------------------------------------------------------
// Filter QP against grid search

#[derive(Clone, Debug, Serialize)]
pub struct QpOracleReport {
    pub instances: usize,
    pub modified: usize,
    /// Largest `|f_qp − f_grid|`.
    pub max_objective_gap: f64,
    /// Largest of stationarity, complementarity, primal violation and multiplier sign error.
    pub max_kkt: f64,
    /// Grid points strictly better than the solver by more than 1e−9.
    pub grid_wins: usize,
    pub elapsed: Duration,
}

impl QpOracleReport {
    pub fn passed(&self, gap_tol: f64, kkt_tol: f64) -> bool {
        self.max_objective_gap <= gap_tol && self.max_kkt < kkt_tol && self.grid_wins == 0
    }
}

/// Rows shaped like barrier rows, all satisfied at a hidden point inside the box.
pub fn random_filter_instance<R: Rng + ?Sized>(rng: &mut R, bounds: &ActionBounds) -> (ControlCommand, Vec<ConstraintRow>) {
    let dt = 0.1;
    let (w_lo, w_hi) = (bounds.delta_min.tan(), bounds.delta_max.tan());
    let feasible = [rng.gen_range(bounds.a_min..bounds.a_max), rng.gen_range(w_lo..w_hi)];
    let n = rng.gen_range(1..=19);
    let rows = (0..n)
        .map(|i| {
            let coef_a = rng.gen_range(-30.0..30.0);
            let coef_tan = rng.gen_range(-400.0..400.0);
            let g: [f64; 2] = [dt * dt * coef_a, dt * dt * coef_tan];
            let norm = g[0].hypot(g[1]);
            let margin = rng.gen_range(0.02..0.5) * norm;
            // residual at the hidden point equals the margin
            let h_cst = margin - (g[0] * feasible[0] + g[1] * feasible[1]);
            ConstraintRow {
                coef_a,
                coef_tan,
                h_cst,
                tightening: 0.0,
                dt,
                kind: RowKind::Vehicle,
                source: i,
                ego_circle: 0,
                h: 1.0,
            }
        })
        .collect();
    let u = ControlCommand::new(
        rng.gen_range(bounds.a_min..bounds.a_max),
        rng.gen_range(bounds.delta_min..bounds.delta_max),
    );
    (u, rows)
}

fn objective(t: [f64; 2], z: [f64; 2]) -> f64 {
    0.5 * ((z[0] - t[0]).powi(2) + (z[1] - t[1]).powi(2))
}

/// Best feasible point of a `n × n` grid over the box, refined by three zoomed passes.
pub fn grid_search(target: [f64; 2], cons: &[Halfspace], lo: [f64; 2], hi: [f64; 2], n: usize) -> Option<(f64, [f64; 2])> {
    let feasible = |z: [f64; 2]| cons.iter().all(|c| c.slack(z) >= 0.0);
    let scan = |lo: [f64; 2], hi: [f64; 2], n: usize| {
        let mut best: Option<(f64, [f64; 2])> = None;
        for i in 0..=n {
            let x = lo[0] + (hi[0] - lo[0]) * i as f64 / n as f64;
            for j in 0..=n {
                let y = lo[1] + (hi[1] - lo[1]) * j as f64 / n as f64;
                let z = [x, y];
                if feasible(z) {
                    let f = objective(target, z);
                    if best.map_or(true, |(bf, _)| f < bf) {
                        best = Some((f, z));
                    }
                }
            }
        }
        best
    };
    let mut best = scan(lo, hi, n)?;
    // Square zoom windows around the incumbent. The window is kept (and re-centred)
    // while the incumbent sits on its edge, which happens when the optimum is the tip
    // of a thin feasible wedge.
    let mut half = 10.0 * ((hi[0] - lo[0]) / n as f64).max((hi[1] - lo[1]) / n as f64);
    let mut shrinks = 0;
    for _ in 0..500 {
        let z = best.1;
        let l = [(z[0] - half).max(lo[0]), (z[1] - half).max(lo[1])];
        let h = [(z[0] + half).min(hi[0]), (z[1] + half).min(hi[1])];
        let step = half / 50.0;
        let mut edge = false;
        if let Some(b) = scan(l, h, 100) {
            if b.0 < best.0 {
                let near =
                    |k: usize| (b.1[k] - l[k] < 2.0 * step && l[k] > lo[k]) || (h[k] - b.1[k] < 2.0 * step && h[k] < hi[k]);
                edge = near(0) || near(1);
                best = b;
            }
        }
        if !edge {
            half /= 5.0;
            shrinks += 1;
            if shrinks == 8 {
                break;
            }
        }
    }
    Some(best)
}

pub fn qp_oracle_suite(instances: usize, seed: u64) -> Result<QpOracleReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = ActionBounds::default();
    let config = SafetyConfig::default();
    let lo = [bounds.a_min, bounds.delta_min.tan()];
    let hi = [bounds.a_max, bounds.delta_max.tan()];
    let mut report = QpOracleReport {
        instances,
        modified: 0,
        max_objective_gap: 0.0,
        max_kkt: 0.0,
        grid_wins: 0,
        elapsed: Duration::ZERO,
    };
    for _ in 0..instances {
        let (u, rows) = random_filter_instance(&mut rng, &bounds);
        let target = [u.a_lon, u.delta.tan()];
        let res = solve_filter(u, &rows, &bounds, &config, &[])?;
        if res.status == FilterStatus::Relaxed {
            return Err(Error::Contract("feasible instance was relaxed".into()));
        }
        if res.status == FilterStatus::Modified {
            report.modified += 1;
        }
        let z = [res.u.a_lon, res.u.delta.tan()];
        let cons = halfspaces(&rows, &bounds);
        let f_qp = objective(target, z);
        let (f_grid, _) = grid_search(target, &cons, lo, hi, 400)
            .ok_or_else(|| Error::Contract("grid found no feasible point".into()))?;
        report.max_objective_gap = report.max_objective_gap.max((f_qp - f_grid).abs());
        if f_grid < f_qp - 1e-9 {
            report.grid_wins += 1;
        }
        let k = kkt_residuals(target, &cons, z, &res.multipliers);
        let worst = k
            .stationarity
            .max(k.complementarity)
            .max(k.primal)
            .max((-k.min_multiplier).max(0.0));
        report.max_kkt = report.max_kkt.max(worst);
    }
    report.elapsed = start.elapsed();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Barrier derivatives against rollouts

/// `[x, y, v, φ]` rate of the continuous bicycle model.
fn bicycle_rate(s: [f64; 4], a: f64, tan_delta: f64, wheelbase: f64) -> [f64; 4] {
    [s[2] * s[3].cos(), s[2] * s[3].sin(), a, s[2] * tan_delta / wheelbase]
}

/// One classical Runge–Kutta step; `dt` may be negative.
pub fn rk4(s: [f64; 4], a: f64, tan_delta: f64, wheelbase: f64, dt: f64) -> [f64; 4] {
    let add = |s: [f64; 4], k: [f64; 4], c: f64| [s[0] + c * k[0], s[1] + c * k[1], s[2] + c * k[2], s[3] + c * k[3]];
    let k1 = bicycle_rate(s, a, tan_delta, wheelbase);
    let k2 = bicycle_rate(add(s, k1, dt / 2.0), a, tan_delta, wheelbase);
    let k3 = bicycle_rate(add(s, k2, dt / 2.0), a, tan_delta, wheelbase);
    let k4 = bicycle_rate(add(s, k3, dt), a, tan_delta, wheelbase);
    let mut out = s;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Central differences of `h` along rollouts: `(ḣ, ḧ(0, 0), ∂ḧ/∂a, ∂ḧ/∂tanδ)`.
pub fn fd_barrier_derivatives(s: &VehicleState, p: [f64; 2], r: f64, dt: f64) -> [f64; 4] {
    let x0 = [s.x, s.y, s.v, s.phi];
    let h = |x: [f64; 4]| cbf_value([x[0], x[1]], p, r);
    let h0 = h(x0);
    let second = |a: f64, w: f64| {
        let hp = h(rk4(x0, a, w, s.wheelbase, dt));
        let hm = h(rk4(x0, a, w, s.wheelbase, -dt));
        ((hp - hm) / (2.0 * dt), (hp - 2.0 * h0 + hm) / (dt * dt))
    };
    let (h_dot, c0) = second(0.0, 0.0);
    let (_, ca) = second(1.0, 0.0);
    let (_, cw) = second(0.0, 1.0);
    [h_dot, c0, ca - c0, cw - c0]
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub poses: usize,
    pub max_rel_h_dot: f64,
    /// Worst over the constant, acceleration and steering coefficients of ḧ.
    pub max_rel_h_ddot: f64,
    /// Poses on which the alternative `Δ_lon = Δx·sinφ + Δy·cosφ` misses the tolerance.
    pub alternative_failures: usize,
}

impl FdReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_h_dot < tol && self.max_rel_h_ddot < tol
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn ttcbf_fd_suite(poses: usize, seed: u64, dt: f64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        poses,
        max_rel_h_dot: 0.0,
        max_rel_h_ddot: 0.0,
        alternative_failures: 0,
    };
    for _ in 0..poses {
        let s = VehicleState::new(
            rng.gen_range(-20.0..20.0),
            rng.gen_range(-20.0..20.0),
            rng.gen_range(0.0..15.0),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        );
        let p = [s.x + rng.gen_range(-15.0..15.0), s.y + rng.gen_range(-15.0..15.0)];
        let r = rng.gen_range(1.0..4.0);
        let fd = fd_barrier_derivatives(&s, p, r, dt);
        let d = derivative_coeffs(&s, p);
        let v2 = s.v * s.v;
        let an = [2.0 * v2, 2.0 * d.d_lon, 2.0 * v2 * d.d_lat / s.wheelbase];
        report.max_rel_h_dot = report.max_rel_h_dot.max(rel(d.h_dot, fd[0]));
        for k in 0..3 {
            report.max_rel_h_ddot = report.max_rel_h_ddot.max(rel(an[k], fd[k + 1]));
        }
        let (sin, cos) = s.phi.sin_cos();
        let alt = (s.x - p[0]) * sin + (s.y - p[1]) * cos;
        if rel(2.0 * alt, fd[2]) >= 1e-3 {
            report.alternative_failures += 1;
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Gradient checks

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub network: String,
    pub encoder: EncoderKind,
    pub params: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over the whole network.
    pub max_rel: f64,
    /// Worst single coordinate, same normalisation per entry.
    pub worst_entry: f64,
}

/// Small agent for checks, sized so every parameter can be perturbed.
pub fn check_agent_config(encoder: EncoderKind) -> AgentConfig {
    AgentConfig {
        ensemble_size: 2,
        n_quantiles: 8,
        hidden: 8,
        batch_size: 4,
        encoder,
        ..AgentConfig::default()
    }
}

pub fn check_env_config() -> EnvConfig {
    let mut c = EnvConfig {
        n_sv: 3,
        n_obs_sv: 3,
        n_wp: 4,
        ..EnvConfig::default()
    };
    c.map.approach_length = 40.0;
    c
}

/// Transitions from random driving in the environment.
pub fn collect_transitions(env_config: &EnvConfig, members: usize, count: usize, seed: u64) -> Result<Vec<Transition>> {
    let mut env = Env::new(env_config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let replay = ReplayBuffer::new(1, members, 0.9);
    let mut obs = env.reset(rng.gen(), None)?;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let step = env.step(to_command(&a, &env_config.bounds))?;
        out.push(Transition {
            obs: obs.clone(),
            action: a,
            reward: step.reward.total,
            next_obs: step.observation.clone(),
            done: step.terminated,
            mask: replay.draw_mask(&mut rng),
        });
        obs = if step.terminated || step.truncated {
            env.reset(rng.gen(), None)?
        } else {
            step.observation
        };
    }
    Ok(out)
}

/// Relative gap between `analytic` and central differences of `loss` over the
/// parameters returned by `select`, as `(network-wise, worst entry)`.
fn fd_check(
    probe: &mut Agent,
    select: fn(&mut Agent) -> Vec<&mut Param>,
    analytic: &[f64],
    h: f64,
    floor: f64,
    loss: &dyn Fn(&Agent) -> Result<f64>,
) -> Result<(f64, f64)> {
    let mut worst: f64 = 0.0;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut k = 0;
    let n_params = select(probe).len();
    for pi in 0..n_params {
        let len = select(probe)[pi].value.len();
        for i in 0..len {
            let orig = select(probe)[pi].value[i];
            select(probe)[pi].value[i] = orig + h;
            let lp = loss(probe)?;
            select(probe)[pi].value[i] = orig - h;
            let lm = loss(probe)?;
            select(probe)[pi].value[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let a = analytic[k];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(floor));
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
            k += 1;
        }
    }
    let norm = f64::sqrt(diff2) / a2.sqrt().max(n2.sqrt()).max(floor);
    Ok((norm, worst))
}

/// Finite-difference checks of the critic, actor and temperature gradients.
pub fn gradient_checks(seed: u64, h: f64, floor: f64) -> Result<Vec<GradCheck>> {
    let env_config = check_env_config();
    let mut out = Vec::new();
    for encoder in [EncoderKind::Attention, EncoderKind::Flat] {
        let cfg = check_agent_config(encoder);
        let mut agent = Agent::new(cfg.clone(), env_config.layout(), seed, 1000)?;
        let ts = collect_transitions(&env_config, cfg.ensemble_size, cfg.batch_size, seed ^ 0x5eed)?;
        let refs: Vec<&Transition> = ts.iter().collect();
        let batch = Batch::from_transitions(&refs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
        let noise = StepNoise::draw(batch.len(), &mut rng);
        agent.compute_gradients(&batch, &noise)?;
        let mut probe = agent.clone();

        let critics: [fn(&mut Agent) -> Vec<&mut Param>; 2] =
            [|a| a.members[0].online.params_mut(), |a| a.members[1].online.params_mut()];
        for (k, select) in critics.into_iter().enumerate().take(agent.members.len()) {
            let analytic = agent.members[k].online.flat_grads();
            let loss = |a: &Agent| Ok(a.critic_losses(&batch, &noise)?[k]);
            let (rel, worst) = fd_check(&mut probe, select, &analytic, h, floor, &loss)?;
            out.push(GradCheck {
                network: format!("critic{k}"),
                encoder,
                params: analytic.len(),
                max_rel: rel,
                worst_entry: worst,
            });
        }

        let analytic = agent.actor.flat_grads();
        let loss = |a: &Agent| a.actor_loss(&batch, &noise);
        let (rel, worst) = fd_check(&mut probe, |a| a.actor.params_mut(), &analytic, h, floor, &loss)?;
        out.push(GradCheck {
            network: "actor".into(),
            encoder,
            params: analytic.len(),
            max_rel: rel,
            worst_entry: worst,
        });

        let analytic = agent.log_alpha.grad.clone();
        let loss = |a: &Agent| a.temperature_loss(&batch, &noise);
        let (rel, worst) = fd_check(&mut probe, |a| vec![&mut a.log_alpha], &analytic, h, floor, &loss)?;
        out.push(GradCheck {
            network: "temperature".into(),
            encoder,
            params: 1,
            max_rel: rel,
            worst_entry: worst,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Single-critic reference update

/// Plain distributional SAC with one quantile critic, a mean-return actor objective
/// and explicit Adam/Polyak arithmetic.
#[derive(Clone, Debug)]
pub struct ReferenceDsac {
    pub critic: QuantileNet,
    pub critic_target: QuantileNet,
    pub actor: ActorNet,
    pub actor_target: ActorNet,
    pub log_alpha: f64,
    critic_adam: AdamState,
    actor_adam: AdamState,
    alpha_adam: AdamState,
    pub rng: ChaCha8Rng,
    gamma: f64,
    kappa: f64,
    polyak: f64,
    target_entropy: f64,
    batch_size: usize,
}

impl ReferenceDsac {
    /// Copies the state of a single-member, prior-free, risk-neutral agent.
    pub fn from_agent(agent: &Agent) -> Result<Self> {
        let c = &agent.config;
        if c.ensemble_size != 1 || c.prior_scale != 0.0 || c.cvar_beta != 1.0 {
            return Err(Error::Contract("reference step needs N = 1, ρ = 0, β = 1".into()));
        }
        let m = &agent.members[0];
        Ok(Self {
            critic: m.online.clone(),
            critic_target: m.target.clone(),
            actor: agent.actor.clone(),
            actor_target: agent.actor_target.clone(),
            log_alpha: agent.log_alpha.value[0],
            critic_adam: m.optim.clone(),
            actor_adam: agent.actor_optim.clone(),
            alpha_adam: agent.alpha_optim.clone(),
            rng: agent.rng.clone(),
            gamma: c.gamma,
            kappa: c.huber_kappa,
            polyak: c.polyak,
            target_entropy: c.target_entropy,
            batch_size: c.batch_size,
        })
    }

    fn normal(&mut self, rows: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, ACTION_DIM);
        for i in 0..rows {
            for k in 0..ACTION_DIM {
                m.set(i, k, self.rng.sample(StandardNormal));
            }
        }
        m
    }

    pub fn step(&mut self, replay: &ReplayBuffer) -> Result<()> {
        let b = self.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..replay.len())).collect();
        let dim = replay.get(0).obs.len();
        let mut obs = Matrix::zeros(b, dim);
        let mut next_obs = Matrix::zeros(b, dim);
        let mut act = Matrix::zeros(b, ACTION_DIM);
        let mut reward = vec![0.0; b];
        let mut done = vec![0.0; b];
        for (r, &i) in idx.iter().enumerate() {
            let t = replay.get(i);
            obs.row_mut(r).copy_from_slice(&t.obs);
            next_obs.row_mut(r).copy_from_slice(&t.next_obs);
            act.row_mut(r).copy_from_slice(&t.action);
            reward[r] = t.reward;
            done[r] = if t.done { 1.0 } else { 0.0 };
        }
        let eps_next = self.normal(b);
        let eps_cur = self.normal(b);
        let alpha = self.log_alpha.exp();

        // Critic.
        let next = ActorNet::sample(&self.actor_target.forward(&next_obs)?, &eps_next)?;
        let zt = self.critic_target.forward(&next_obs, &next.action)?;
        let n_q = zt.cols();
        let taus: Vec<f64> = (0..n_q).map(|j| (j as f64 + 0.5) / n_q as f64).collect();
        let (feat, enc_tape) = self.critic.features(&obs)?;
        let (z, head_tape) = self.critic.head_forward(&feat, &act)?;
        let mut dz = Matrix::zeros(b, n_q);
        for r in 0..b {
            for i in 0..n_q {
                let y = reward[r] + self.gamma * (1.0 - done[r]) * (zt.get(r, i) - alpha * next.log_prob[r]);
                for j in 0..n_q {
                    let d = y - z.get(r, j);
                    let w = if d < 0.0 { 1.0 - taus[j] } else { taus[j] };
                    let clipped = d.clamp(-self.kappa, self.kappa) / self.kappa;
                    dz.set(r, j, dz.get(r, j) - w * clipped / (n_q as f64 * b as f64));
                }
            }
        }
        self.critic.zero_grad();
        self.critic.backward(&enc_tape, &head_tape, &dz)?;

        // Actor on the pre-update critic.
        let (raw, actor_tape) = self.actor.forward_recorded(&obs)?;
        let cur = ActorNet::sample(&raw, &eps_cur)?;
        let (zc, tape_c) = self.critic.head_forward(&feat, &cur.action)?;
        let _ = zc;
        let mut dq = Matrix::zeros(b, n_q);
        for v in dq.data_mut() {
            *v = -1.0 / (b as f64 * n_q as f64);
        }
        let d_action = self.critic.action_grad(&tape_c, &dq)?;
        let d_logp = vec![alpha / b as f64; b];
        self.actor.zero_grad();
        self.actor.backward(&actor_tape, &ActorNet::raw_grad(&cur, &d_action, &d_logp))?;

        // Temperature.
        let mean_lp = cur.log_prob.iter().sum::<f64>() / b as f64;
        let g_alpha = -(mean_lp + self.target_entropy);

        adam(&mut self.critic_adam, self.critic.params_mut());
        adam(&mut self.actor_adam, self.actor.params_mut());
        let mut la = Param::new(vec![1], vec![self.log_alpha]);
        la.grad[0] = g_alpha;
        adam(&mut self.alpha_adam, vec![&mut la]);
        self.log_alpha = la.value[0];

        polyak(self.critic_target.params_mut(), self.critic.params(), self.polyak);
        polyak(self.actor_target.params_mut(), self.actor.params(), self.polyak);
        Ok(())
    }

    /// Largest parameter difference against the agent's corresponding networks.
    pub fn max_param_diff(&self, agent: &Agent) -> f64 {
        let m = &agent.members[0];
        let pairs: [(Vec<f64>, Vec<f64>); 4] = [
            (self.critic.flat_values(), m.online.flat_values()),
            (self.critic_target.flat_values(), m.target.flat_values()),
            (self.actor.flat_values(), agent.actor.flat_values()),
            (self.actor_target.flat_values(), agent.actor_target.flat_values()),
        ];
        let mut worst = (self.log_alpha - agent.log_alpha.value[0]).abs();
        for (a, b) in &pairs {
            if a.len() != b.len() {
                return f64::INFINITY;
            }
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

fn adam(st: &mut AdamState, params: Vec<&mut Param>) {
    if st.m.len() != params.len() {
        st.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        st.v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    }
    let lr = st.schedule.at(st.step);
    st.step += 1;
    let t = st.step as i32;
    for (i, p) in params.into_iter().enumerate() {
        for k in 0..p.value.len() {
            let g = p.grad[k];
            st.m[i][k] = st.beta1 * st.m[i][k] + (1.0 - st.beta1) * g;
            st.v[i][k] = st.beta2 * st.v[i][k] + (1.0 - st.beta2) * g * g;
            let mh = st.m[i][k] / (1.0 - st.beta1.powi(t));
            let vh = st.v[i][k] / (1.0 - st.beta2.powi(t));
            p.value[k] -= lr * mh / (vh.sqrt() + st.eps);
        }
    }
}

fn polyak(target: Vec<&mut Param>, online: Vec<&Param>, tau: f64) {
    for (t, o) in target.into_iter().zip(online) {
        for (a, b) in t.value.iter_mut().zip(&o.value) {
            *a = (1.0 - tau) * *a + tau * b;
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReductionReport {
    pub steps: usize,
    pub max_diff: f64,
}

/// Trains a reduced agent and the reference side by side from the same state.
pub fn reduction_suite(seed: u64, steps: usize) -> Result<ReductionReport> {
    let env_config = check_env_config();
    let mut cfg = check_agent_config(EncoderKind::Attention);
    crate::pipeline::Variant::NoCbf.adjust(&mut cfg);
    cfg.ensemble_size = 1;
    cfg.prior_scale = 0.0;
    cfg.cvar_beta = 1.0;
    cfg.hidden = 16;
    cfg.batch_size = 16;
    let mut agent = Agent::new(cfg.clone(), env_config.layout(), seed, 100)?;
    let mut replay = agent.new_replay();
    for t in collect_transitions(&env_config, 1, 64, seed ^ 0xabc)? {
        replay.push(t)?;
    }
    let mut max_diff: f64 = 0.0;
    for _ in 0..steps {
        let mut reference = ReferenceDsac::from_agent(&agent)?;
        reference.step(&replay)?;
        agent.train_step(&replay)?;
        max_diff = max_diff.max(reference.max_param_diff(&agent));
    }
    Ok(ReductionReport { steps, max_diff })
}

// ---------------------------------------------------------------------------
// Forward invariance around a parked vehicle

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    pub rollouts: usize,
    /// Rollouts in which some QP had to be relaxed; excluded from the minimum.
    pub relaxed_rollouts: usize,
    /// Of those, rollouts whose first command already needed relaxing.
    pub relaxed_at_start: usize,
    /// Smallest vehicle barrier value over feasible rollouts and simulation substeps.
    pub min_h: f64,
    /// Same minimum including relaxed rollouts.
    pub min_h_all: f64,
    /// `−0.05·(r_ego + r_obs)²`.
    pub bound: f64,
    pub elapsed: Duration,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.min_h >= self.bound
    }
}

fn min_vehicle_h(ego: &VehicleState, obstacle: &VehicleState) -> f64 {
    let a = envelope(ego);
    let b = envelope(obstacle);
    let r = a.radius + b.radius;
    let mut m = f64::INFINITY;
    for p in a.centers {
        for q in b.centers {
            m = m.min(cbf_value(p, q, r));
        }
    }
    m
}

/// Random and obstacle-seeking commands through the filter at 10 Hz, simulated at 30 Hz.
pub fn forward_invariance_suite(rollouts: usize, steps: usize, seed: u64) -> Result<InvarianceReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bounds = ActionBounds::default();
    let config = SafetyConfig::default();
    let params = CbfParams::default();
    let (policy_dt, substeps) = (0.1, 3);
    let obstacle = VehicleState::new(0.0, 0.0, 0.0, rng.gen_range(-PI..PI));
    let obs_env = envelope(&obstacle);
    let r_sum = 2.0 * obs_env.radius;
    let bound = -0.05 * r_sum * r_sum;
    let mut report = InvarianceReport {
        rollouts,
        relaxed_rollouts: 0,
        relaxed_at_start: 0,
        min_h: f64::INFINITY,
        min_h_all: f64::INFINITY,
        bound,
        elapsed: Duration::ZERO,
    };
    for _ in 0..rollouts {
        let mut ego = loop {
            let d = rng.gen_range(4.0..25.0);
            let ang: f64 = rng.gen_range(-PI..PI);
            let heading = ang + PI + rng.gen_range(-0.8..0.8);
            let s = VehicleState::new(d * ang.cos(), d * ang.sin(), rng.gen_range(0.0..12.0), heading);
            if min_vehicle_h(&s, &obstacle) > 0.0 {
                break s;
            }
        };
        let seeking = rng.gen_bool(0.5);
        let u_ju = rng.gen_range(0.0..1.0);
        let mut relaxed = false;
        let mut worst = f64::INFINITY;
        let mut warm = Vec::new();
        for k in 0..steps {
            let u_rl = if seeking {
                let bearing = (obstacle.y - ego.y).atan2(obstacle.x - ego.x);
                let err = crate::dynamics::wrap_angle(bearing - ego.phi);
                ControlCommand::new(bounds.a_max, err.clamp(bounds.delta_min, bounds.delta_max))
            } else {
                ControlCommand::new(
                    rng.gen_range(bounds.a_min..bounds.a_max),
                    rng.gen_range(bounds.delta_min..bounds.delta_max),
                )
            };
            let prox = closest_points(&ego, &[obs_env], &[], config.n_points, config.m_points);
            let rows = assemble(&ego, &prox, &params, policy_dt, u_ju);
            let res = solve_filter(u_rl, &rows, &bounds, &config, &warm)?;
            match res.status {
                FilterStatus::Relaxed => {
                    if !relaxed && k == 0 {
                        report.relaxed_at_start += 1;
                    }
                    relaxed = true;
                }
                FilterStatus::Modified => warm.clone_from(&res.active),
                FilterStatus::Unmodified => {}
            }
            for _ in 0..substeps {
                ego = bicycle_step(&ego, res.u, policy_dt / substeps as f64);
                worst = worst.min(min_vehicle_h(&ego, &obstacle));
            }
        }
        report.min_h_all = report.min_h_all.min(worst);
        if relaxed {
            report.relaxed_rollouts += 1;
        } else {
            report.min_h = report.min_h.min(worst);
        }
    }
    report.elapsed = start.elapsed();
    Ok(report)
}

// ---------------------------------------------------------------------------
// Quantile and uncertainty identities

#[derive(Clone, Debug, Serialize)]
pub struct CvarReport {
    pub draws: usize,
    /// Largest `|cvar(q, 1) − mean(q)|`.
    pub max_mean_gap: f64,
    /// Draws where `cvar(q, 0.25)` over 32 heads differed from the mean of the lowest 8.
    pub tail_mismatches: usize,
}

impl CvarReport {
    pub fn passed(&self) -> bool {
        self.max_mean_gap <= 1e-12 && self.tail_mismatches == 0
    }
}

pub fn cvar_suite(draws: usize, seed: u64) -> Result<CvarReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CvarReport {
        draws,
        max_mean_gap: 0.0,
        tail_mismatches: 0,
    };
    for _ in 0..draws {
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let mut q: Vec<f64> = (0..32).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        q.sort_by(f64::total_cmp);
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        let full = crate::distrl::quantile::cvar(&q, 1.0)?;
        report.max_mean_gap = report.max_mean_gap.max((full - mean).abs());
        let low8 = q[..8].iter().sum::<f64>() / 8.0;
        if crate::distrl::quantile::cvar(&q, 0.25)? != low8 {
            report.tail_mismatches += 1;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct UncertaintyReport {
    /// σ_EU of an ensemble whose members are copies of one network, without priors.
    pub cloned_sigma_eu: f64,
    pub max_weight_sum_error: f64,
    pub draws: usize,
    pub joint_out_of_range: usize,
}

impl UncertaintyReport {
    pub fn passed(&self) -> bool {
        self.cloned_sigma_eu == 0.0 && self.max_weight_sum_error <= 1e-12 && self.joint_out_of_range == 0
    }
}

pub fn uncertainty_suite(draws: usize, seed: u64) -> Result<UncertaintyReport> {
    use crate::uncertainty::{epistemic, joint, joint_weights};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let env = Env::new(check_env_config())?;
    let mut cfg = check_agent_config(EncoderKind::Attention);
    cfg.ensemble_size = 5;
    cfg.prior_scale = 0.0;
    let mut agent = Agent::new(cfg, env.config.layout(), seed, 1)?;
    let first = agent.members[0].clone();
    for m in agent.members.iter_mut().skip(1) {
        m.online = first.online.clone();
        m.prior = first.prior.clone();
    }
    let mut env = env;
    let mut cloned_sigma_eu: f64 = 0.0;
    for k in 0..8 {
        let obs = env.reset(seed + k, None)?;
        let actions: Vec<[f64; ACTION_DIM]> = (0..4).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let per = agent.member_quantiles(&obs, &actions)?;
        for i in 0..actions.len() {
            let cvars: Vec<f64> = per
                .iter()
                .map(|m| crate::distrl::quantile::weighted(m.row(i), agent.cvar_weights()))
                .collect();
            cloned_sigma_eu = cloned_sigma_eu.max(epistemic(&cvars)?);
        }
    }

    let mut report = UncertaintyReport {
        cloned_sigma_eu,
        max_weight_sum_error: 0.0,
        draws,
        joint_out_of_range: 0,
    };
    for _ in 0..draws {
        let (ua, ue) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        let w = joint_weights(ua, ue);
        report.max_weight_sum_error = report.max_weight_sum_error.max((w[0] + w[1] - 1.0).abs());
        let (sa, se) = (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
        let ju = joint(sa, se, rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        if !(ju >= sa.min(se) && ju <= sa.max(se)) {
            report.joint_out_of_range += 1;
        }
    }
    Ok(report)
}

/// Rows assembled for an ego among traffic, with their expected count `3N + M`.
pub fn row_count_check(n_points: usize, m_points: usize, seed: u64) -> Result<(usize, usize)> {
    let mut env = Env::new(check_env_config())?;
    env.reset(seed, None)?;
    let prox = env.proximity(n_points, m_points);
    let rows = assemble(&env.ego, &prox, &CbfParams::default(), 0.1, 0.5);
    Ok((rows.len(), 3 * n_points + m_points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_straight_line() {
        let s = rk4([0.0, 0.0, 2.0, 0.0], 0.0, 0.0, 2.5, 0.5);
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] == 0.0);
    }

    #[test]
    fn grid_finds_unconstrained_target() {
        let (f, z) = grid_search([0.5, 0.1], &[], [-1.0, -1.0], [1.0, 1.0], 40).unwrap();
        assert!(f < 1e-10, "{z:?}");
    }
}
