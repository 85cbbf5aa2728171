//! Aleatoric, epistemic and joint uncertainty of the critic ensemble.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::distrl::quantile::weighted;
use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Samples needed before buffer statistics replace the neutral defaults.
pub const COLD_START: usize = 100;
pub const ETA_FLOOR: f64 = 1e-6;
pub const DEFAULT_CAPACITY: usize = 10_000;

/// Population mean and standard deviation, shifted by the first sample so identical
/// inputs give exactly zero spread.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let x0 = xs[0];
    let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// FIFO of the most recent scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaBuffer {
    capacity: usize,
    values: VecDeque<f64>,
    pushed: u64,
}

impl SigmaBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
            pushed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total pushes, including evicted values.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, x: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(x);
        self.pushed += 1;
    }

    /// Stored values, oldest first.
    pub fn values(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    pub fn is_cold(&self) -> bool {
        self.values.len() < COLD_START
    }

    /// `(μ, η)` for the tanh normalizer: `(0, 1)` while cold, `η` floored otherwise.
    pub fn stats(&self) -> (f64, f64) {
        if self.is_cold() {
            return (0.0, 1.0);
        }
        let (a, b) = self.values.as_slices();
        let n = self.values.len() as f64;
        let m = a.iter().chain(b).sum::<f64>() / n;
        let s = (a.iter().chain(b).map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        (m, s.max(ETA_FLOOR))
    }

    pub fn normalize(&self, x: f64) -> f64 {
        let (mu, eta) = self.stats();
        squash(x, mu, eta)
    }

    /// Fraction of stored values `≤ x`; 0.5 while cold.
    pub fn percentile(&self, x: f64) -> f64 {
        if self.is_cold() {
            return 0.5;
        }
        let below = self.values.iter().filter(|&&v| v <= x).count();
        below as f64 / self.values.len() as f64
    }

    pub fn restore(capacity: usize, values: &[f64], pushed: u64) -> Result<Self> {
        if capacity == 0 || values.len() > capacity {
            return Err(Error::Checkpoint(format!(
                "buffer holds {} values for capacity {capacity}",
                values.len()
            )));
        }
        Ok(Self {
            capacity,
            values: values.iter().copied().collect(),
            pushed,
        })
    }
}

/// `½(tanh((x − μ)/η) + 1)`
pub fn squash(x: f64, mu: f64, eta: f64) -> f64 {
    0.5 * (((x - mu) / eta).tanh() + 1.0)
}

/// Population standard deviation of per-member CVaR values.
pub fn epistemic(cvars: &[f64]) -> Result<f64> {
    if cvars.len() < 2 {
        return Err(Error::Contract(format!(
            "epistemic uncertainty needs at least two members, got {}",
            cvars.len()
        )));
    }
    Ok(mean_std(cvars).1)
}

/// Mean over members of the spread of their quantile heads.
pub fn aleatoric(quantiles: &[&[f64]]) -> f64 {
    if quantiles.is_empty() {
        return 0.0;
    }
    quantiles.iter().map(|q| mean_std(q).1).sum::<f64>() / quantiles.len() as f64
}

/// Softmax weights over the normalized aleatoric and epistemic levels.
pub fn joint_weights(u_au: f64, u_eu: f64) -> [f64; 2] {
    let m = u_au.max(u_eu);
    let ea = (u_au - m).exp();
    let ee = (u_eu - m).exp();
    let s = ea + ee;
    [ea / s, ee / s]
}

pub fn joint(sigma_au: f64, sigma_eu: f64, u_au: f64, u_eu: f64) -> f64 {
    let [wa, we] = joint_weights(u_au, u_eu);
    let ju = wa * sigma_au + we * sigma_eu;
    ju.clamp(sigma_au.min(sigma_eu), sigma_au.max(sigma_eu))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySnapshot {
    pub sigma_au: f64,
    pub sigma_eu: f64,
    pub sigma_ju: f64,
    pub percentile: f64,
    /// Softmax weights on `(σ_AU, σ_EU)`.
    pub weights: [f64; 2],
    /// Normalized joint level used for tightening.
    pub u_ju: f64,
}

/// The three sliding buffers and the per-step snapshot logic.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyEstimator {
    pub au: SigmaBuffer,
    pub eu: SigmaBuffer,
    pub ju: SigmaBuffer,
}

impl UncertaintyEstimator {
    pub fn new(capacity: usize) -> Self {
        Self {
            au: SigmaBuffer::new(capacity),
            eu: SigmaBuffer::new(capacity),
            ju: SigmaBuffer::new(capacity),
        }
    }

    /// Snapshot from the member quantiles of one `(s, a)`; the levels are normalized
    /// against the buffers before the new values are pushed.
    pub fn observe(&mut self, quantiles: &[&[f64]], cvar_w: &[f64]) -> Result<UncertaintySnapshot> {
        let cvars: Vec<f64> = quantiles.iter().map(|q| weighted(q, cvar_w)).collect();
        let sigma_eu = epistemic(&cvars)?;
        let sigma_au = aleatoric(quantiles);
        Ok(self.observe_sigmas(sigma_au, sigma_eu))
    }

    pub fn observe_sigmas(&mut self, sigma_au: f64, sigma_eu: f64) -> UncertaintySnapshot {
        let u_au = self.au.normalize(sigma_au);
        let u_eu = self.eu.normalize(sigma_eu);
        let weights = joint_weights(u_au, u_eu);
        let sigma_ju = joint(sigma_au, sigma_eu, u_au, u_eu);
        let percentile = self.ju.percentile(sigma_ju);
        let u_ju = self.ju.normalize(sigma_ju);
        self.au.push(sigma_au);
        self.eu.push(sigma_eu);
        self.ju.push(sigma_ju);
        UncertaintySnapshot {
            sigma_au,
            sigma_eu,
            sigma_ju,
            percentile,
            weights,
            u_ju,
        }
    }
}

/// Row `i` of a `[k, N_q]` matrix for every member.
pub fn member_rows(per_member: &[Matrix], i: usize) -> Vec<&[f64]> {
    per_member.iter().map(|m| m.row(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std_of_pair() {
        assert!((epistemic(&[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(epistemic(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!(epistemic(&[1.0]).is_err());
    }

    #[test]
    fn one_spread_member() {
        let a = [0.0, 2.0];
        let b = [1.0, 1.0];
        assert!((aleatoric(&[&a, &b, &b]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hand_set_joint() {
        let u_au = 0.5 * (1f64.tanh() + 1.0);
        let w = joint_weights(u_au, 0.5);
        let e = (u_au.exp(), 0.5f64.exp());
        assert!((w[0] - e.0 / (e.0 + e.1)).abs() < 1e-15);
        assert!((joint(1.0, 0.0, u_au, 0.5) - w[0]).abs() < 1e-15);
    }

    #[test]
    fn percentile_counts() {
        let mut b = SigmaBuffer::new(1000);
        assert_eq!(b.percentile(3.0), 0.5);
        for k in 0..100 {
            b.push([1.0, 2.0, 3.0, 4.0][k % 4]);
        }
        assert_eq!(b.percentile(2.5), 0.5);
        assert_eq!(b.percentile(0.0), 0.0);
        assert_eq!(b.percentile(9.0), 1.0);
    }

    #[test]
    fn eviction_keeps_latest() {
        let mut b = SigmaBuffer::new(3);
        for k in 0..7 {
            b.push(k as f64);
        }
        assert_eq!(b.values(), vec![4.0, 5.0, 6.0]);
        assert_eq!(b.pushed(), 7);
    }
}
