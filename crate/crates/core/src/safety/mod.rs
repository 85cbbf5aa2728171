//! Minimal-intervention barrier filter on `(a_lon, tanδ)`.

pub mod cbf;
pub mod qp;

use serde::{Deserialize, Serialize};

pub use cbf::{assemble, cbf_value, cbf_values, derivative_coeffs, h_ddot, tightening, CbfParams, ConstraintRow, Derivatives, RowKind};
pub use qp::{kkt_residuals, project, Halfspace, KktResiduals, QpOutcome, QpSolution};

use crate::dynamics::{ActionBounds, ControlCommand};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyConfig {
    pub cbf: CbfParams,
    /// Obstacle points per step.
    pub n_points: usize,
    /// Road-boundary points per step.
    pub m_points: usize,
    /// Per-unit cost of row slack when the rows are jointly infeasible.
    pub slack_penalty: f64,
    pub max_iter: usize,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            cbf: CbfParams::default(),
            n_points: 5,
            m_points: 4,
            slack_penalty: 1e4,
            max_iter: 200,
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.cbf;
        if !(c.gamma >= 0.0 && c.lambda_veh > 0.0 && c.lambda_road > 0.0 && c.c_w >= 0.0) {
            return Err(Error::Config("barrier parameters must be nonnegative with positive slopes".into()));
        }
        if !(self.slack_penalty > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("slack_penalty and max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterStatus {
    Unmodified,
    Modified,
    Relaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub u: ControlCommand,
    pub status: FilterStatus,
    /// Active row ids; `rows.len() + k` is box side `k` (a_min, a_max, w_min, w_max).
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    /// Largest row violation at the returned command.
    pub max_residual: f64,
}

/// Rows followed by the four box sides, all as `g·z ≥ b`.
pub fn halfspaces(rows: &[ConstraintRow], bounds: &ActionBounds) -> Vec<Halfspace> {
    let mut cons: Vec<Halfspace> = rows
        .iter()
        .map(|r| {
            let (g, b) = r.halfspace();
            Halfspace { g, b }
        })
        .collect();
    let (w_lo, w_hi) = (bounds.delta_min.tan(), bounds.delta_max.tan());
    cons.push(Halfspace { g: [1.0, 0.0], b: bounds.a_min });
    cons.push(Halfspace { g: [-1.0, 0.0], b: -bounds.a_max });
    cons.push(Halfspace { g: [0.0, 1.0], b: w_lo });
    cons.push(Halfspace { g: [0.0, -1.0], b: -w_hi });
    cons
}

fn max_violation(rows: &[ConstraintRow], z: [f64; 2]) -> f64 {
    rows.iter().map(|r| -r.residual(z[0], z[1])).fold(0.0, f64::max)
}

/// `argmin ½‖z − z_rl‖²` over the rows and box, with `z = (a_lon, tanδ)`.
pub fn solve_filter(
    u_rl: ControlCommand,
    rows: &[ConstraintRow],
    bounds: &ActionBounds,
    config: &SafetyConfig,
    warm: &[usize],
) -> Result<FilterResult> {
    if rows.iter().any(|r| !(r.coef_a.is_finite() && r.coef_tan.is_finite() && r.h_cst.is_finite() && r.tightening.is_finite())) {
        return Err(Error::NonFinite("barrier row".into()));
    }
    let target = [u_rl.a_lon, u_rl.delta.tan()];
    if bounds.contains(u_rl, 0.0) && rows.iter().all(|r| r.residual(target[0], target[1]) >= 0.0) {
        return Ok(FilterResult {
            u: u_rl,
            status: FilterStatus::Unmodified,
            active: Vec::new(),
            multipliers: vec![0.0; rows.len() + 4],
            iterations: 0,
            max_residual: 0.0,
        });
    }
    let cons = halfspaces(rows, bounds);
    match project(target, &cons, warm, config.max_iter)? {
        QpOutcome::Solved(sol) => Ok(FilterResult {
            u: ControlCommand::new(sol.z[0], sol.z[1].atan()),
            status: FilterStatus::Modified,
            max_residual: max_violation(rows, sol.z),
            active: sol.active,
            multipliers: sol.multipliers,
            iterations: sol.iterations,
        }),
        QpOutcome::Infeasible { iterations, .. } => {
            let mut r = relaxed(target, &cons, rows.len(), config.slack_penalty)?;
            r.iterations += iterations;
            r.max_residual = max_violation(rows, [r.u.a_lon, r.u.delta.tan()]);
            Ok(r)
        }
    }
}

/// `½‖z − t‖² + ϱ Σ max(0, bᵢ − gᵢ·z)` over the rows.
fn penalized(target: [f64; 2], rows: &[Halfspace], rho: f64, z: [f64; 2]) -> f64 {
    let d = [z[0] - target[0], z[1] - target[1]];
    let mut f = 0.5 * (d[0] * d[0] + d[1] * d[1]);
    for c in rows {
        f += rho * (-c.slack(z)).max(0.0);
    }
    f
}

/// Parameter interval of `p + s·d` inside the box.
fn box_interval(p: [f64; 2], d: [f64; 2], boxes: &[Halfspace]) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for b in boxes {
        let gd = b.g[0] * d[0] + b.g[1] * d[1];
        let s0 = b.slack(p);
        if gd.abs() < 1e-15 {
            if s0 < -1e-12 * (1.0 + b.b.abs()) {
                return None;
            }
        } else if gd > 0.0 {
            lo = lo.max(-s0 / gd);
        } else {
            hi = hi.min(-s0 / gd);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// `min ½‖z − t‖² + ϱ Σ max(0, bᵢ − gᵢ·z)` over the box (the last four halfspaces).
///
/// The objective is a convex quadratic on every cell of the row arrangement, so its
/// minimiser is a cell's stationary point, the minimiser along an edge segment, or a
/// vertex. All of these are enumerated through the segments each line is cut into.
fn relaxed(target: [f64; 2], cons: &[Halfspace], n_rows: usize, rho: f64) -> Result<FilterResult> {
    let rows = &cons[..n_rows];
    let boxes = &cons[n_rows..];
    let clamp = |mut z: [f64; 2]| {
        for b in boxes {
            let s = b.slack(z);
            if s < 0.0 {
                let k = if b.g[0] != 0.0 { 0 } else { 1 };
                z[k] += -s / b.g[k];
            }
        }
        z
    };
    let inside = |z: [f64; 2]| boxes.iter().all(|b| b.slack(z) >= -1e-12 * (1.0 + b.b.abs()));
    let pull = |violated: &dyn Fn(usize) -> bool| {
        let mut z = target;
        for (i, c) in rows.iter().enumerate() {
            if violated(i) {
                z[0] += rho * c.g[0];
                z[1] += rho * c.g[1];
            }
        }
        z
    };
    let mut best = clamp(target);
    let mut best_f = penalized(target, rows, rho, best);
    let mut consider = |z: [f64; 2]| {
        if z[0].is_finite() && z[1].is_finite() && inside(z) {
            let f = penalized(target, rows, rho, z);
            if f < best_f {
                best_f = f;
                best = z;
            }
        }
    };
    let start = clamp(target);
    consider(pull(&|i| rows[i].slack(start) < 0.0));
    let mut breaks = Vec::with_capacity(cons.len() + 2);
    for (l, line) in cons.iter().enumerate() {
        let gg = line.g[0] * line.g[0] + line.g[1] * line.g[1];
        if gg == 0.0 {
            continue;
        }
        let p = [line.g[0] * line.b / gg, line.g[1] * line.b / gg];
        let d = [-line.g[1], line.g[0]];
        let Some((lo, hi)) = box_interval(p, d, boxes) else {
            continue;
        };
        breaks.clear();
        breaks.push(lo);
        breaks.push(hi);
        for (k, c) in rows.iter().enumerate() {
            if k == l {
                continue;
            }
            let gd = c.g[0] * d[0] + c.g[1] * d[1];
            if gd.abs() > 1e-15 {
                let s = -c.slack(p) / gd;
                if s > lo && s < hi {
                    breaks.push(s);
                }
            }
        }
        breaks.sort_by(f64::total_cmp);
        for w in breaks.windows(2) {
            let (s0, s1) = (w[0], w[1]);
            let at = |s: f64| [p[0] + s * d[0], p[1] + s * d[1]];
            let mid = at(0.5 * (s0 + s1));
            let v = |i: usize| i != l && rows[i].slack(mid) < 0.0;
            // Along the segment the violated set is fixed; minimise the quadratic there.
            let q = pull(&v);
            let dd = d[0] * d[0] + d[1] * d[1];
            let s = ((q[0] - p[0]) * d[0] + (q[1] - p[1]) * d[1]) / dd;
            consider(at(s.clamp(s0, s1)));
            consider(at(s0));
            consider(at(s1));
            // Stationary points of the two cells on either side of the segment.
            consider(pull(&v));
            if l < n_rows {
                consider(pull(&|i| v(i) || i == l));
            }
        }
    }
    let z = best;
    let mut multipliers = vec![0.0; cons.len()];
    let mut r = [z[0] - target[0], z[1] - target[1]];
    for (i, c) in rows.iter().enumerate() {
        let s = c.slack(z);
        if s < -1e-9 * (1.0 + c.b.abs()) {
            multipliers[i] = rho;
            r[0] -= rho * c.g[0];
            r[1] -= rho * c.g[1];
        }
    }
    let active: Vec<usize> = (0..cons.len())
        .filter(|&i| {
            let c = &cons[i];
            c.slack(z).abs() <= 1e-9 * (1.0 + c.b.abs())
        })
        .collect();
    // Split the remaining stationarity residual over the tight constraints.
    let normals: Vec<[f64; 2]> = active.iter().map(|&i| cons[i].g).collect();
    match normals.len() {
        0 => {}
        1 => {
            let n = normals[0];
            multipliers[active[0]] = (r[0] * n[0] + r[1] * n[1]) / (n[0] * n[0] + n[1] * n[1]);
        }
        _ => {
            let (n1, n2) = (normals[0], normals[1]);
            let det = n1[0] * n2[1] - n2[0] * n1[1];
            if det.abs() > 1e-12 {
                multipliers[active[0]] = (r[0] * n2[1] - n2[0] * r[1]) / det;
                multipliers[active[1]] = (n1[0] * r[1] - r[0] * n1[1]) / det;
            }
        }
    }
    let active = (0..n_rows)
        .filter(|&i| multipliers[i] == rho || active.contains(&i))
        .chain(active.iter().copied().filter(|&i| i >= n_rows))
        .collect();
    Ok(FilterResult {
        u: ControlCommand::new(z[0], z[1].atan()),
        status: FilterStatus::Relaxed,
        active,
        multipliers,
        iterations: 0,
        max_residual: 0.0,
    })
}

/// Per-decision-loop filter state: configuration, warm start and a call counter.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetyFilter {
    pub config: SafetyConfig,
    pub bounds: ActionBounds,
    /// Control period the rows are built for.
    pub dt: f64,
    warm: Vec<usize>,
    pub calls: u64,
}

impl SafetyFilter {
    pub fn new(config: SafetyConfig, bounds: ActionBounds, dt: f64) -> Self {
        Self {
            config,
            bounds,
            dt,
            warm: Vec::new(),
            calls: 0,
        }
    }

    pub fn reset_warm_start(&mut self) {
        self.warm.clear();
    }

    pub fn filter(&mut self, u_rl: ControlCommand, rows: &[ConstraintRow]) -> Result<FilterResult> {
        self.calls += 1;
        let r = solve_filter(u_rl, rows, &self.bounds, &self.config, &self.warm)?;
        if r.status == FilterStatus::Modified {
            self.warm.clone_from(&r.active);
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(coef_a: f64, h_cst: f64) -> ConstraintRow {
        ConstraintRow {
            coef_a,
            coef_tan: 0.0,
            h_cst,
            tightening: 0.0,
            dt: 1.0,
            kind: RowKind::Vehicle,
            source: 0,
            ego_circle: 0,
            h: 1.0,
        }
    }

    #[test]
    fn satisfied_rows_leave_command() {
        let u = ControlCommand::new(0.7, -0.13);
        let r = solve_filter(u, &[row(1.0, 5.0)], &ActionBounds::default(), &SafetyConfig::default(), &[]).unwrap();
        assert_eq!(r.status, FilterStatus::Unmodified);
        assert_eq!(r.u, u);
    }

    #[test]
    fn single_row_projects_acceleration() {
        // a ≥ −1.5
        let u = ControlCommand::new(-4.0, 0.2);
        let r = solve_filter(u, &[row(1.0, 1.5)], &ActionBounds::default(), &SafetyConfig::default(), &[]).unwrap();
        assert_eq!(r.status, FilterStatus::Modified);
        assert!((r.u.a_lon + 1.5).abs() < 1e-12);
        assert!((r.u.delta - 0.2).abs() < 1e-12);
    }

    #[test]
    fn contradictory_rows_are_relaxed() {
        // a ≥ 1 and a ≤ −1, with a penalty that makes a = 0 optimal.
        let rows = [row(1.0, -1.0), row(-1.0, -1.0)];
        let cfg = SafetyConfig {
            slack_penalty: 10.0,
            ..SafetyConfig::default()
        };
        let r = solve_filter(ControlCommand::new(0.5, 0.0), &rows, &ActionBounds::default(), &cfg, &[]).unwrap();
        assert_eq!(r.status, FilterStatus::Relaxed);
        assert!((r.u.a_lon - 0.5).abs() < 1e-12);
        assert!((r.max_residual - 1.5).abs() < 1e-12);
    }

    #[test]
    fn relaxation_prefers_cheaper_violation() {
        // a ≥ 2 (weight 1) against a ≤ −1 scaled by 3: violating the first is cheaper.
        let rows = [row(1.0, -2.0), row(-3.0, -3.0)];
        let r = solve_filter(ControlCommand::new(0.0, 0.0), &rows, &ActionBounds::default(), &SafetyConfig::default(), &[]).unwrap();
        assert_eq!(r.status, FilterStatus::Relaxed);
        assert!((r.u.a_lon + 1.0).abs() < 1e-9, "{:?}", r.u);
    }
}
