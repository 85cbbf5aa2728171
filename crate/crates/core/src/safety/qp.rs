//! Dual active-set projection onto a polygon in the plane.
//!
//! Solves `min ½‖z − t‖²` subject to `gᵢ·z ≥ bᵢ` with the Goldfarb–Idnani scheme
//! specialised to an identity Hessian. At most two constraints are active at once.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Halfspace {
    pub g: [f64; 2],
    pub b: f64,
}

impl Halfspace {
    pub fn slack(&self, z: [f64; 2]) -> f64 {
        dot(self.g, z) - self.b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub z: [f64; 2],
    /// Active constraint indices in the order they entered.
    pub active: Vec<usize>,
    /// One multiplier per constraint; zero off the active set.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QpOutcome {
    Solved(QpSolution),
    Infeasible { iterations: usize, constraint: usize },
}

#[inline]
fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn tol(c: &Halfspace, z: [f64; 2]) -> f64 {
    1e-11 * (1.0 + c.b.abs() + norm(c.g) * norm(z))
}

/// `(N ᵀN)⁻¹ Nᵀ v` and `v − N r` for `q ≤ 2` active normals.
fn split(normals: &[[f64; 2]], v: [f64; 2]) -> ([f64; 2], Vec<f64>) {
    match normals.len() {
        0 => (v, Vec::new()),
        1 => {
            let n = normals[0];
            let r = dot(n, v) / dot(n, n);
            ([v[0] - r * n[0], v[1] - r * n[1]], vec![r])
        }
        _ => {
            let (n1, n2) = (normals[0], normals[1]);
            let det = n1[0] * n2[1] - n2[0] * n1[1];
            // Columns n1, n2 span the plane, so the projection residual is zero.
            let r1 = (v[0] * n2[1] - n2[0] * v[1]) / det;
            let r2 = (n1[0] * v[1] - v[0] * n1[1]) / det;
            ([0.0, 0.0], vec![r1, r2])
        }
    }
}

fn independent(normals: &[[f64; 2]]) -> bool {
    match normals.len() {
        0 | 1 => normals.iter().all(|n| norm(*n) > 0.0),
        2 => {
            let (a, b) = (normals[0], normals[1]);
            (a[0] * b[1] - b[0] * a[1]).abs() > 1e-12 * norm(a) * norm(b)
        }
        _ => false,
    }
}

/// Equality-constrained projection on `set`, accepted only if it satisfies every KKT
/// condition of the full problem.
fn try_active_set(target: [f64; 2], cons: &[Halfspace], set: &[usize]) -> Option<QpSolution> {
    if set.iter().any(|&i| i >= cons.len()) {
        return None;
    }
    let normals: Vec<[f64; 2]> = set.iter().map(|&i| cons[i].g).collect();
    if !independent(&normals) {
        return None;
    }
    let mut lambda = vec![0.0; set.len()];
    let z = match set.len() {
        0 => target,
        1 => {
            let c = &cons[set[0]];
            let l = -c.slack(target) / dot(c.g, c.g);
            lambda[0] = l;
            [target[0] + l * c.g[0], target[1] + l * c.g[1]]
        }
        _ => {
            let (c1, c2) = (&cons[set[0]], &cons[set[1]]);
            let det = c1.g[0] * c2.g[1] - c2.g[0] * c1.g[1];
            let z = [
                (c1.b * c2.g[1] - c2.b * c1.g[1]) / det,
                (c1.g[0] * c2.b - c2.g[0] * c1.b) / det,
            ];
            let (_, r) = split(&normals, [z[0] - target[0], z[1] - target[1]]);
            lambda.copy_from_slice(&r);
            z
        }
    };
    if lambda.iter().any(|&l| l < 0.0) {
        return None;
    }
    if cons.iter().any(|c| c.slack(z) < -tol(c, z)) {
        return None;
    }
    let mut multipliers = vec![0.0; cons.len()];
    for (&i, &l) in set.iter().zip(&lambda) {
        multipliers[i] = l;
    }
    Some(QpSolution {
        z,
        active: set.to_vec(),
        multipliers,
        iterations: 0,
    })
}

/// Projection of `target` onto `{z : gᵢ·z ≥ bᵢ}`. A previous active set is tried first.
pub fn project(target: [f64; 2], cons: &[Halfspace], warm: &[usize], max_iter: usize) -> Result<QpOutcome> {
    if !warm.is_empty() {
        if let Some(sol) = try_active_set(target, cons, warm) {
            return Ok(QpOutcome::Solved(sol));
        }
    }
    let mut x = target;
    let mut active: Vec<usize> = Vec::with_capacity(2);
    let mut u: Vec<f64> = Vec::with_capacity(2);
    let mut iterations = 0;
    loop {
        // Most violated constraint, scaled by its normal length.
        let mut pick: Option<(usize, f64)> = None;
        for (i, c) in cons.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let s = c.slack(x);
            if s < -tol(c, x) {
                let score = s / norm(c.g);
                if pick.map_or(true, |(_, best)| score < best) {
                    pick = Some((i, score));
                }
            }
        }
        let Some((j, _)) = pick else {
            let mut multipliers = vec![0.0; cons.len()];
            for (&i, &l) in active.iter().zip(&u) {
                multipliers[i] = l;
            }
            return Ok(QpOutcome::Solved(QpSolution {
                z: x,
                active,
                multipliers,
                iterations,
            }));
        };
        let np = cons[j].g;
        let mut u_plus = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::IterationCap {
                    cap: max_iter,
                    rows: cons.len(),
                    violation: -cons[j].slack(x),
                });
            }
            let normals: Vec<[f64; 2]> = active.iter().map(|&i| cons[i].g).collect();
            let (z, r) = split(&normals, np);
            let z_zero = norm(z) <= 1e-12 * norm(np);
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, &rk) in r.iter().enumerate() {
                if rk > 0.0 {
                    let t = u[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let t2 = if z_zero {
                f64::INFINITY
            } else {
                (-cons[j].slack(x) / dot(z, np)).max(0.0)
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Ok(QpOutcome::Infeasible {
                    iterations,
                    constraint: j,
                });
            }
            let t = t1.min(t2);
            for (uk, rk) in u.iter_mut().zip(&r) {
                *uk -= t * rk;
            }
            u_plus += t;
            if !z_zero {
                x = [x[0] + t * z[0], x[1] + t * z[1]];
            }
            if t2 <= t1 {
                active.push(j);
                u.push(u_plus);
                break;
            }
            let k = drop.expect("partial step has a blocking constraint");
            active.remove(k);
            u.remove(k);
        }
    }
}

/// Stationarity, sign, complementarity and feasibility residuals of a candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub min_multiplier: f64,
    pub complementarity: f64,
    pub primal: f64,
}

pub fn kkt_residuals(target: [f64; 2], cons: &[Halfspace], z: [f64; 2], multipliers: &[f64]) -> KktResiduals {
    let mut grad = [z[0] - target[0], z[1] - target[1]];
    let mut min_multiplier: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    let mut primal: f64 = 0.0;
    for (c, &l) in cons.iter().zip(multipliers) {
        grad[0] -= l * c.g[0];
        grad[1] -= l * c.g[1];
        min_multiplier = min_multiplier.min(l);
        complementarity = complementarity.max((l * c.slack(z)).abs());
        primal = primal.max(-c.slack(z));
    }
    KktResiduals {
        stationarity: norm(grad),
        min_multiplier,
        complementarity,
        primal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solved(o: QpOutcome) -> QpSolution {
        match o {
            QpOutcome::Solved(s) => s,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interior_target_is_returned() {
        let cons = [Halfspace { g: [1.0, 0.0], b: -1.0 }];
        let s = solved(project([0.5, 0.5], &cons, &[], 200).unwrap());
        assert_eq!(s.z, [0.5, 0.5]);
        assert!(s.active.is_empty());
    }

    #[test]
    fn axis_aligned_halfplane() {
        let cons = [Halfspace { g: [1.0, 0.0], b: 2.0 }];
        let s = solved(project([0.0, 0.3], &cons, &[], 200).unwrap());
        assert_eq!(s.z, [2.0, 0.3]);
        assert_eq!(s.multipliers, vec![2.0]);
    }

    #[test]
    fn corner_of_two_halfplanes() {
        let cons = [
            Halfspace { g: [1.0, 0.0], b: 1.0 },
            Halfspace { g: [0.0, 1.0], b: 1.0 },
            Halfspace { g: [1.0, 1.0], b: 0.0 },
        ];
        let s = solved(project([0.0, 0.0], &cons, &[], 200).unwrap());
        assert!((s.z[0] - 1.0).abs() < 1e-14 && (s.z[1] - 1.0).abs() < 1e-14);
        let k = kkt_residuals([0.0, 0.0], &cons, s.z, &s.multipliers);
        assert!(k.stationarity < 1e-12 && k.min_multiplier >= 0.0);
        let warm = solved(project([0.1, -0.2], &cons, &s.active, 200).unwrap());
        assert_eq!(warm.iterations, 0);
        assert!((warm.z[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn empty_polygon_is_reported() {
        let cons = [
            Halfspace { g: [1.0, 0.0], b: 1.0 },
            Halfspace { g: [-1.0, 0.0], b: 0.0 },
        ];
        assert!(matches!(
            project([0.0, 0.0], &cons, &[], 200).unwrap(),
            QpOutcome::Infeasible { .. }
        ));
    }
}
