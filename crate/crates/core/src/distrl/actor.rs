//! Tanh-squashed Gaussian policy.

use std::f64::consts::{LN_2, PI};

use rand::Rng;

use super::critic::ACTION_DIM;
use crate::dynamics::{ActionBounds, ControlCommand};
use crate::error::{check_dim, Result};
use crate::nn::dense::DenseTape;
use crate::nn::encoder::EncoderTape;
use crate::nn::{Activation, DenseNet, EncoderKind, Matrix, ObsLayout, Param, Parameterized, StateEncoder};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct ActorNet {
    pub encoder: StateEncoder,
    /// Emits `[mean (2), log-std (2)]`.
    pub head: DenseNet,
}

pub struct ActorTape {
    enc: EncoderTape,
    head: DenseTape,
}

/// A reparameterized batch of actions.
#[derive(Clone, Debug)]
pub struct PolicySample {
    pub raw: Matrix,
    pub eps: Matrix,
    pub pre: Matrix,
    /// Squashed actions in (−1, 1).
    pub action: Matrix,
    pub log_prob: Vec<f64>,
}

/// log(1 − tanh²(x)) without cancellation.
pub fn log_one_minus_tanh_sq(x: f64) -> f64 {
    2.0 * (LN_2 - x - softplus(-2.0 * x))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn clamp_log_std(r: f64) -> f64 {
    r.clamp(LOG_STD_MIN, LOG_STD_MAX)
}

impl ActorNet {
    pub fn new<R: Rng + ?Sized>(
        kind: EncoderKind,
        layout: ObsLayout,
        hidden: usize,
        encoder_layers: usize,
        head_layers: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = StateEncoder::new(kind, layout, hidden, encoder_layers, rng);
        let mut sizes = vec![encoder.output_dim()];
        sizes.extend(std::iter::repeat(hidden).take(head_layers));
        sizes.push(2 * ACTION_DIM);
        let head = DenseNet::mlp(&sizes, Activation::Gelu, Activation::Identity, rng);
        Self { encoder, head }
    }

    pub fn forward_recorded(&self, obs: &Matrix) -> Result<(Matrix, ActorTape)> {
        let (f, enc) = self.encoder.forward_recorded(obs)?;
        let (out, head) = self.head.forward_recorded(&f)?;
        Ok((out, ActorTape { enc, head }))
    }

    pub fn forward(&self, obs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_recorded(obs)?.0)
    }

    /// Squashed samples `tanh(μ + σ·ε)` with log-densities over the squashed space.
    pub fn sample(raw: &Matrix, eps: &Matrix) -> Result<PolicySample> {
        check_dim("ActorNet::sample", raw.rows(), eps.rows())?;
        check_dim("ActorNet::sample noise", ACTION_DIM, eps.cols())?;
        let b = raw.rows();
        let mut pre = Matrix::zeros(b, ACTION_DIM);
        let mut action = Matrix::zeros(b, ACTION_DIM);
        let mut log_prob = vec![0.0; b];
        for i in 0..b {
            let mut lp = 0.0;
            for k in 0..ACTION_DIM {
                let mu = raw.get(i, k);
                let ls = clamp_log_std(raw.get(i, ACTION_DIM + k));
                let e = eps.get(i, k);
                let p = mu + ls.exp() * e;
                pre.set(i, k, p);
                action.set(i, k, p.tanh());
                lp += -0.5 * e * e - ls - 0.5 * (2.0 * PI).ln() - log_one_minus_tanh_sq(p);
            }
            log_prob[i] = lp;
        }
        Ok(PolicySample {
            raw: raw.clone(),
            eps: eps.clone(),
            pre,
            action,
            log_prob,
        })
    }

    pub fn deterministic(raw: &Matrix) -> Matrix {
        let mut a = Matrix::zeros(raw.rows(), ACTION_DIM);
        for i in 0..raw.rows() {
            for k in 0..ACTION_DIM {
                a.set(i, k, raw.get(i, k).tanh());
            }
        }
        a
    }

    /// Gradient of a loss with respect to the raw head output, given
    /// `d_action = ∂L/∂action` and `d_logp = ∂L/∂log π` per sample.
    pub fn raw_grad(sample: &PolicySample, d_action: &Matrix, d_logp: &[f64]) -> Matrix {
        let b = sample.raw.rows();
        let mut g = Matrix::zeros(b, 2 * ACTION_DIM);
        for i in 0..b {
            for k in 0..ACTION_DIM {
                let r = sample.raw.get(i, ACTION_DIM + k);
                let sigma = clamp_log_std(r).exp();
                let e = sample.eps.get(i, k);
                let t = sample.pre.get(i, k).tanh();
                // dlogπ/dpre = 2 tanh(pre); dpre/dμ = 1, dpre/dlogσ = σε; dlogπ/dlogσ has an extra −1.
                let d_pre = d_action.get(i, k) * (1.0 - t * t) + d_logp[i] * 2.0 * t;
                g.set(i, k, d_pre);
                let d_ls = d_pre * sigma * e - d_logp[i];
                let inside = r > LOG_STD_MIN && r < LOG_STD_MAX;
                g.set(i, ACTION_DIM + k, if inside { d_ls } else { 0.0 });
            }
        }
        g
    }

    pub fn backward(&mut self, tape: &ActorTape, d_raw: &Matrix) -> Result<()> {
        let d_feat = self.head.backward(&tape.head, d_raw)?;
        self.encoder.backward(&tape.enc, &d_feat)
    }
}

impl Parameterized for ActorNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

/// Maps a squashed action in [−1, 1]² to physical units.
/// Maps each squashed component to its bound range, piecewise linearly so that 0 is
/// the zero command whenever the range contains it.
pub fn to_command(a: &[f64], bounds: &ActionBounds) -> ControlCommand {
    ControlCommand {
        a_lon: scale(a[0], bounds.a_min, bounds.a_max),
        delta: scale(a[1], bounds.delta_min, bounds.delta_max),
    }
}

fn pivot(lo: f64, hi: f64) -> f64 {
    if lo < 0.0 && hi > 0.0 {
        0.0
    } else {
        0.5 * (lo + hi)
    }
}

fn scale(x: f64, lo: f64, hi: f64) -> f64 {
    let x = x.clamp(-1.0, 1.0);
    let c = pivot(lo, hi);
    if x >= 0.0 {
        c + x * (hi - c)
    } else {
        c + x * (c - lo)
    }
}

fn unscale(u: f64, lo: f64, hi: f64) -> f64 {
    let c = pivot(lo, hi);
    let x = if u >= c { (u - c) / (hi - c) } else { (u - c) / (c - lo) };
    x.clamp(-1.0, 1.0)
}

/// Inverse of [`to_command`].
pub fn from_command(u: ControlCommand, bounds: &ActionBounds) -> [f64; 2] {
    [
        unscale(u.a_lon, bounds.a_min, bounds.a_max),
        unscale(u.delta, bounds.delta_min, bounds.delta_max),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_squash_correction() {
        for x in [-40.0, -3.0, 0.0, 0.5, 3.0, 40.0] {
            let direct = (1.0 - f64::tanh(x).powi(2)).ln();
            let stable = log_one_minus_tanh_sq(x);
            if direct.is_finite() {
                assert!((direct - stable).abs() < 1e-9, "{x}");
            }
            assert!(stable.is_finite());
        }
    }

    #[test]
    fn command_round_trip() {
        let b = ActionBounds::default();
        let u = to_command(&[0.3, -0.7], &b);
        let back = from_command(u, &b);
        assert!((back[0] - 0.3).abs() < 1e-12 && (back[1] + 0.7).abs() < 1e-12);
        assert_eq!(to_command(&[-1.0, 1.0], &b), ControlCommand::new(-5.0, 0.4));
        assert_eq!(to_command(&[0.0, 0.0], &b), ControlCommand::new(0.0, 0.0));
        assert_eq!(to_command(&[0.5, -0.5], &b), ControlCommand::new(1.5, -0.2));
    }
}
