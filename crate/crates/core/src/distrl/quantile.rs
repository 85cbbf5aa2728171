//! Fixed-fraction quantile algebra: CVaR distortion and the quantile Huber loss.

use crate::error::{Error, Result};

/// Interval midpoints τ̂_i = (2i + 1) / (2 N_q) of the uniform fractions τ_i = i / N_q.
pub fn tau_hats(n_q: usize) -> Vec<f64> {
    (0..n_q).map(|i| (2 * i + 1) as f64 / (2 * n_q) as f64).collect()
}

/// Per-head weights `(τ_{i+1} − τ_i)·ζ′(τ̂_i)` of the CVaR distortion ζ(τ) = min(τ/β, 1).
pub fn cvar_weights(n_q: usize, beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Contract(format!("CVaR level must lie in (0, 1], got {beta}")));
    }
    let w = 1.0 / n_q as f64;
    Ok(tau_hats(n_q)
        .into_iter()
        .map(|t| if t < beta { w / beta } else { 0.0 })
        .collect())
}

/// Distorted expectation of a quantile return; summation runs left to right.
pub fn cvar(q: &[f64], beta: f64) -> Result<f64> {
    let w = cvar_weights(q.len(), beta)?;
    Ok(weighted(q, &w))
}

#[inline]
pub fn weighted(q: &[f64], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for (z, wi) in q.iter().zip(w) {
        s += z * wi;
    }
    s
}

/// Huber function L_κ.
#[inline]
pub fn huber(d: f64, kappa: f64) -> f64 {
    if d.abs() <= kappa {
        0.5 * d * d
    } else {
        kappa * (d.abs() - 0.5 * kappa)
    }
}

/// ρ^κ_τ(δ) = |τ − 𝕀{δ<0}| · L_κ(δ) / κ.
#[inline]
pub fn quantile_huber(d: f64, tau: f64, kappa: f64) -> f64 {
    let ind = if d < 0.0 { 1.0 } else { 0.0 };
    (tau - ind).abs() * huber(d, kappa) / kappa
}

/// ∂ρ^κ_τ / ∂δ.
#[inline]
pub fn quantile_huber_grad(d: f64, tau: f64, kappa: f64) -> f64 {
    let ind = if d < 0.0 { 1.0 } else { 0.0 };
    let g = if d.abs() <= kappa { d / kappa } else { d.signum() };
    (tau - ind).abs() * g
}

/// Pairwise loss for one member over a batch.
///
/// `target[b]` holds the N_q target samples y_{b,i}, `pred[b]` the N_q online heads
/// Z_{b,j}; δ_ij = y_i − Z_j. Returns the loss
/// `(1/B) Σ_b m_b Σ_i Σ_j (1/N_q) ρ^κ_{τ̂_j}(δ_ij)` and its gradient with respect to `pred`.
pub fn member_loss(
    target: &[Vec<f64>],
    pred: &[Vec<f64>],
    mask: &[f64],
    kappa: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if !(kappa > 0.0) {
        return Err(Error::Contract(format!("Huber threshold must be positive, got {kappa}")));
    }
    let b = pred.len();
    let n_q = pred.first().map_or(0, Vec::len);
    let taus = tau_hats(n_q);
    let w = 1.0 / n_q as f64;
    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; n_q]; b];
    for k in 0..b {
        if mask[k] == 0.0 {
            continue;
        }
        let m = mask[k];
        for &y in &target[k] {
            for j in 0..n_q {
                let d = y - pred[k][j];
                loss += scale * m * w * quantile_huber(d, taus[j], kappa);
                grad[k][j] -= scale * m * w * quantile_huber_grad(d, taus[j], kappa);
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cvar_full_level_is_mean() {
        let q: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin()).collect();
        let mean = q.iter().sum::<f64>() / 32.0;
        assert!((cvar(&q, 1.0).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn cvar_quarter_is_first_eight() {
        let q: Vec<f64> = (0..32).map(|i| i as f64).collect();
        assert_eq!(cvar(&q, 0.25).unwrap(), 3.5);
        assert!(cvar(&q, 0.0).is_err());
    }

    #[test]
    fn huber_branches() {
        assert_eq!(quantile_huber(0.5, 0.25, 1.0), 0.25 * 0.125);
        assert_eq!(quantile_huber(-0.5, 0.25, 1.0), 0.75 * 0.125);
        assert_eq!(quantile_huber(3.0, 0.5, 1.0), 0.5 * 2.5);
    }

    #[test]
    fn masked_rows_contribute_nothing() {
        let t = vec![vec![1.0, 2.0]];
        let p = vec![vec![0.0, 5.0]];
        let (l, g) = member_loss(&t, &p, &[0.0], 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].iter().all(|&v| v == 0.0));
    }
}
