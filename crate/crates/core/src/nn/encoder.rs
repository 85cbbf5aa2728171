//! Observation encoders shared by the actor and the critics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionPool, AttentionTape};
use super::dense::{Activation, DenseNet, DenseTape};
use super::matrix::Matrix;
use super::{Param, Parameterized};
use crate::error::{check_dim, Result};

pub const EGO_DIM: usize = 10;
pub const SV_DIM: usize = 6;
pub const WP_DIM: usize = 2;
pub const TASK_DIM: usize = 3;
pub const PE_FREQS: usize = 8;

/// Flat observation layout: ego block, `n_sv` vehicle blocks, `n_wp` waypoints, task one-hot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub n_sv: usize,
    pub n_wp: usize,
}

// Fixed input scales, applied before any trainable layer.
const EGO_SCALE: [f64; EGO_DIM] = [1.0, 50.0, 50.0, 10.0, 10.0, std::f64::consts::PI, 1.0, 20.0, 10.0, 50.0];
const SV_SCALE: [f64; SV_DIM] = [1.0, 50.0, 50.0, 10.0, 10.0, std::f64::consts::PI];
const WP_SCALE: f64 = 20.0;

impl ObsLayout {
    pub fn dim(&self) -> usize {
        EGO_DIM + SV_DIM * self.n_sv + WP_DIM * self.n_wp + TASK_DIM
    }

    pub fn sv_offset(&self) -> usize {
        EGO_DIM
    }

    pub fn wp_offset(&self) -> usize {
        EGO_DIM + SV_DIM * self.n_sv
    }

    pub fn task_offset(&self) -> usize {
        self.wp_offset() + WP_DIM * self.n_wp
    }

    /// Divides every raw feature by its fixed scale.
    pub fn normalize(&self, obs: &Matrix) -> Result<Matrix> {
        check_dim("ObsLayout::normalize", self.dim(), obs.cols())?;
        let mut out = obs.clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            for (v, s) in r[..EGO_DIM].iter_mut().zip(EGO_SCALE) {
                *v /= s;
            }
            for j in 0..self.n_sv {
                let off = EGO_DIM + j * SV_DIM;
                for (v, s) in r[off..off + SV_DIM].iter_mut().zip(SV_SCALE) {
                    *v /= s;
                }
            }
            let wp = self.wp_offset();
            for v in &mut r[wp..wp + WP_DIM * self.n_wp] {
                *v /= WP_SCALE;
            }
        }
        Ok(out)
    }
}

/// Sin/cos encoding of a waypoint index at `PE_FREQS` geometric frequencies.
pub fn position_encoding(index: usize) -> [f64; 2 * PE_FREQS] {
    let mut pe = [0.0; 2 * PE_FREQS];
    for f in 0..PE_FREQS {
        let w = 1.0 / 100f64.powf(f as f64 / PE_FREQS as f64);
        pe[2 * f] = (index as f64 * w).sin();
        pe[2 * f + 1] = (index as f64 * w).cos();
    }
    pe
}

/// Relative waypoint coordinates concatenated with their position encoding,
/// scaled by a learnable per-waypoint weight, then a dense stack.
#[derive(Clone, Debug)]
pub struct WaypointEncoder {
    pub n_wp: usize,
    pub weights: Param,
    pub net: DenseNet,
}

pub struct WaypointTape {
    base: Matrix,
    net: DenseTape,
}

const WP_FEAT: usize = WP_DIM + 2 * PE_FREQS;

impl WaypointEncoder {
    pub fn new<R: Rng + ?Sized>(n_wp: usize, hidden: usize, layers: usize, rng: &mut R) -> Self {
        let mut sizes = vec![n_wp * WP_FEAT];
        sizes.extend(std::iter::repeat(hidden).take(layers.max(1)));
        Self {
            n_wp,
            weights: Param::new(vec![n_wp], vec![1.0; n_wp]),
            net: DenseNet::mlp(&sizes, Activation::Gelu, Activation::Gelu, rng),
        }
    }

    /// `wp`: `[B, n_wp * 2]` (already normalized).
    fn base(&self, wp: &Matrix) -> Matrix {
        let mut base = Matrix::zeros(wp.rows(), self.n_wp * WP_FEAT);
        let pes: Vec<_> = (0..self.n_wp).map(position_encoding).collect();
        for b in 0..wp.rows() {
            let src = wp.row(b);
            let dst = base.row_mut(b);
            for k in 0..self.n_wp {
                let off = k * WP_FEAT;
                dst[off] = src[2 * k];
                dst[off + 1] = src[2 * k + 1];
                dst[off + 2..off + WP_FEAT].copy_from_slice(&pes[k]);
            }
        }
        base
    }

    fn weighted(&self, base: &Matrix) -> Matrix {
        let mut x = base.clone();
        for b in 0..x.rows() {
            let r = x.row_mut(b);
            for k in 0..self.n_wp {
                let w = self.weights.value[k];
                r[k * WP_FEAT..(k + 1) * WP_FEAT]
                    .iter_mut()
                    .for_each(|v| *v *= w);
            }
        }
        x
    }

    pub fn forward_recorded(&self, wp: &Matrix) -> Result<(Matrix, WaypointTape)> {
        let base = self.base(wp);
        let (out, net) = self.net.forward_recorded(&self.weighted(&base))?;
        Ok((out, WaypointTape { base, net }))
    }

    pub fn backward(&mut self, tape: &WaypointTape, d_out: &Matrix, accumulate: bool) -> Result<()> {
        if !accumulate {
            return Ok(());
        }
        let dx = self.net.backward(&tape.net, d_out)?;
        for b in 0..dx.rows() {
            let (d, x) = (dx.row(b), tape.base.row(b));
            for k in 0..self.n_wp {
                let r = k * WP_FEAT..(k + 1) * WP_FEAT;
                self.weights.grad[k] += d[r.clone()].iter().zip(&x[r]).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        Ok(())
    }
}

impl Parameterized for WaypointEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weights];
        v.extend(self.net.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weights];
        v.extend(self.net.params_mut());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Per-entity encoders, attention over vehicles, weighted waypoints.
    Attention,
    /// Plain MLP over the whole flat observation.
    Flat,
}

#[derive(Clone, Debug)]
pub enum StateEncoder {
    Attention {
        layout: ObsLayout,
        ego: DenseNet,
        sv: DenseNet,
        attn: AttentionPool,
        wp: WaypointEncoder,
    },
    Flat {
        layout: ObsLayout,
        net: DenseNet,
    },
}

pub enum EncoderTape {
    Attention {
        batch: usize,
        ego: DenseTape,
        sv: DenseTape,
        attn: AttentionTape,
        wp: WaypointTape,
    },
    Flat(DenseTape),
}

impl StateEncoder {
    pub fn new<R: Rng + ?Sized>(
        kind: EncoderKind,
        layout: ObsLayout,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let stack = |input: usize, rng: &mut R| {
            let mut sizes = vec![input];
            sizes.extend(std::iter::repeat(hidden).take(layers.max(1)));
            DenseNet::mlp(&sizes, Activation::Gelu, Activation::Gelu, rng)
        };
        match kind {
            EncoderKind::Attention => {
                let ego = stack(EGO_DIM, rng);
                let sv = stack(SV_DIM, rng);
                let attn = AttentionPool::new(hidden, rng);
                let wp = WaypointEncoder::new(layout.n_wp, hidden, layers, rng);
                StateEncoder::Attention {
                    layout,
                    ego,
                    sv,
                    attn,
                    wp,
                }
            }
            EncoderKind::Flat => StateEncoder::Flat {
                layout,
                net: stack(layout.dim(), rng),
            },
        }
    }

    pub fn layout(&self) -> ObsLayout {
        match self {
            StateEncoder::Attention { layout, .. } | StateEncoder::Flat { layout, .. } => *layout,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            StateEncoder::Attention { attn, wp, .. } => attn.hidden() + wp.net.output_dim() + TASK_DIM,
            StateEncoder::Flat { net, .. } => net.output_dim(),
        }
    }

    /// `obs` is the raw flat observation batch; normalization happens here.
    pub fn forward_recorded(&self, obs: &Matrix) -> Result<(Matrix, EncoderTape)> {
        let layout = self.layout();
        let x = layout.normalize(obs)?;
        match self {
            StateEncoder::Flat { net, .. } => {
                let (out, tape) = net.forward_recorded(&x)?;
                Ok((out, EncoderTape::Flat(tape)))
            }
            StateEncoder::Attention {
                ego, sv, attn, wp, ..
            } => {
                let batch = x.rows();
                let (ego_h, ego_t) = ego.forward_recorded(&x.columns(0, EGO_DIM))?;
                let n_sv = layout.n_sv;
                let mut sv_in = Matrix::zeros(batch * n_sv, SV_DIM);
                let mut mask = vec![false; batch * n_sv];
                for b in 0..batch {
                    let r = x.row(b);
                    for j in 0..n_sv {
                        let off = layout.sv_offset() + j * SV_DIM;
                        sv_in.row_mut(b * n_sv + j).copy_from_slice(&r[off..off + SV_DIM]);
                        mask[b * n_sv + j] = r[off] > 0.5;
                    }
                }
                let (sv_h, sv_t) = sv.forward_recorded(&sv_in)?;
                let (pooled, attn_t) = attn.forward_recorded(&ego_h, &sv_h, &mask)?;
                let (wp_h, wp_t) = wp.forward_recorded(&x.columns(layout.wp_offset(), WP_DIM * layout.n_wp))?;
                let task = x.columns(layout.task_offset(), TASK_DIM);
                let out = Matrix::hcat(&[&pooled, &wp_h, &task])?;
                Ok((
                    out,
                    EncoderTape::Attention {
                        batch,
                        ego: ego_t,
                        sv: sv_t,
                        attn: attn_t,
                        wp: wp_t,
                    },
                ))
            }
        }
    }

    pub fn forward(&self, obs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_recorded(obs)?.0)
    }

    /// Accumulates parameter gradients for a feature-gradient `d_feat`.
    pub fn backward(&mut self, tape: &EncoderTape, d_feat: &Matrix) -> Result<()> {
        check_dim("StateEncoder::backward", self.output_dim(), d_feat.cols())?;
        match (self, tape) {
            (StateEncoder::Flat { net, .. }, EncoderTape::Flat(t)) => {
                net.backward(t, d_feat)?;
                Ok(())
            }
            (
                StateEncoder::Attention {
                    ego, sv, attn, wp, ..
                },
                EncoderTape::Attention {
                    batch,
                    ego: ego_t,
                    sv: sv_t,
                    attn: attn_t,
                    wp: wp_t,
                },
            ) => {
                check_dim("StateEncoder::backward batch", *batch, d_feat.rows())?;
                let h = attn.hidden();
                let d_pool = d_feat.columns(0, h);
                let d_wp = d_feat.columns(h, wp.net.output_dim());
                let (d_ego, d_sv) = attn.backward(attn_t, &d_pool, true)?;
                ego.backward(ego_t, &d_ego)?;
                sv.backward(sv_t, &d_sv)?;
                wp.backward(wp_t, &d_wp, true)?;
                Ok(())
            }
            _ => Err(crate::error::Error::Contract(
                "encoder tape does not match encoder kind".into(),
            )),
        }
    }
}

impl Parameterized for StateEncoder {
    fn params(&self) -> Vec<&Param> {
        match self {
            StateEncoder::Attention {
                ego, sv, attn, wp, ..
            } => {
                let mut v = ego.params();
                v.extend(sv.params());
                v.extend(attn.params());
                v.extend(wp.params());
                v
            }
            StateEncoder::Flat { net, .. } => net.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            StateEncoder::Attention {
                ego, sv, attn, wp, ..
            } => {
                let mut v = ego.params_mut();
                v.extend(sv.params_mut());
                v.extend(attn.params_mut());
                v.extend(wp.params_mut());
                v
            }
            StateEncoder::Flat { net, .. } => net.params_mut(),
        }
    }
}
