//! Quantile critics and the prior-mixed ensemble member.

use rand::Rng;

use crate::error::{check_dim, Result};
use crate::nn::dense::DenseTape;
use crate::nn::encoder::EncoderTape;
use crate::nn::{Activation, AdamState, DenseNet, EncoderKind, LrSchedule, Matrix, ObsLayout, Param, Parameterized, StateEncoder};

pub const ACTION_DIM: usize = 2;

/// State encoder followed by an MLP over `[features, action]` emitting N_q quantiles.
#[derive(Clone, Debug)]
pub struct QuantileNet {
    pub encoder: StateEncoder,
    pub head: DenseNet,
    frozen: bool,
}

pub struct HeadTape(pub DenseTape);

impl QuantileNet {
    pub fn new<R: Rng + ?Sized>(
        kind: EncoderKind,
        layout: ObsLayout,
        hidden: usize,
        encoder_layers: usize,
        head_layers: usize,
        n_q: usize,
        rng: &mut R,
    ) -> Self {
        let encoder = StateEncoder::new(kind, layout, hidden, encoder_layers, rng);
        let mut sizes = vec![encoder.output_dim() + ACTION_DIM];
        sizes.extend(std::iter::repeat(hidden).take(head_layers));
        sizes.push(n_q);
        let head = DenseNet::mlp(&sizes, Activation::Gelu, Activation::Identity, rng);
        Self {
            encoder,
            head,
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self.head = self.head.frozen();
        self
    }

    pub fn n_quantiles(&self) -> usize {
        self.head.output_dim()
    }

    pub fn features(&self, obs: &Matrix) -> Result<(Matrix, EncoderTape)> {
        self.encoder.forward_recorded(obs)
    }

    pub fn head_forward(&self, feat: &Matrix, act: &Matrix) -> Result<(Matrix, HeadTape)> {
        check_dim("QuantileNet action", ACTION_DIM, act.cols())?;
        let x = Matrix::hcat(&[feat, act])?;
        let (z, t) = self.head.forward_recorded(&x)?;
        Ok((z, HeadTape(t)))
    }

    pub fn forward(&self, obs: &Matrix, act: &Matrix) -> Result<Matrix> {
        let (f, _) = self.features(obs)?;
        Ok(self.head_forward(&f, act)?.0)
    }

    /// Accumulates parameter gradients for `dz = ∂L/∂Z`. No-op on frozen nets.
    pub fn backward(&mut self, enc: &EncoderTape, head: &HeadTape, dz: &Matrix) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        let dx = self.head.backward(&head.0, dz)?;
        let d_feat = dx.columns(0, self.encoder.output_dim());
        self.encoder.backward(enc, &d_feat)
    }

    /// ∂L/∂action for `dz = ∂L/∂Z`, without touching parameter gradients.
    pub fn action_grad(&self, head: &HeadTape, dz: &Matrix) -> Result<Matrix> {
        let dx = self.head.input_grad(&head.0, dz)?;
        Ok(dx.columns(self.encoder.output_dim(), ACTION_DIM))
    }
}

impl Parameterized for QuantileNet {
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

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// `(O + ρF) / (1 + ρ)` elementwise.
pub fn mix(online: &Matrix, prior: &Matrix, rho: f64) -> Matrix {
    let mut out = online.clone();
    for (o, f) in out.data_mut().iter_mut().zip(prior.data()) {
        *o = (*o + rho * f) / (1.0 + rho);
    }
    out
}

/// One ensemble member: trainable net, frozen prior and the online target copy.
#[derive(Clone, Debug)]
pub struct Member {
    pub online: QuantileNet,
    pub prior: QuantileNet,
    pub target: QuantileNet,
    pub optim: AdamState,
}

impl Member {
    /// `online_rng` initializes the trainable net; `prior_rng` is an independent stream.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        kind: EncoderKind,
        layout: ObsLayout,
        hidden: usize,
        encoder_layers: usize,
        head_layers: usize,
        n_q: usize,
        lr: LrSchedule,
        online_rng: &mut R,
        prior_rng: &mut R,
    ) -> Self {
        let online = QuantileNet::new(kind, layout, hidden, encoder_layers, head_layers, n_q, online_rng);
        let prior =
            QuantileNet::new(kind, layout, hidden, encoder_layers, head_layers, n_q, prior_rng).frozen();
        Self {
            target: online.clone(),
            online,
            prior,
            optim: AdamState::new(lr),
        }
    }

    /// Z_n(s, a) with the online net.
    pub fn z(&self, obs: &Matrix, act: &Matrix, rho: f64) -> Result<Matrix> {
        Ok(mix(&self.online.forward(obs, act)?, &self.prior.forward(obs, act)?, rho))
    }

    /// Z̄_n(s, a) with the target net.
    pub fn z_target(&self, obs: &Matrix, act: &Matrix, rho: f64) -> Result<Matrix> {
        Ok(mix(&self.target.forward(obs, act)?, &self.prior.forward(obs, act)?, rho))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_cases() {
        let o = Matrix::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let f = Matrix::from_vec(1, 3, vec![1.1, 1.1, 1.1]).unwrap();
        for v in mix(&o, &f, 10.0).data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        assert_eq!(mix(&o, &f, 0.0), o);
        assert!((mix(&f, &f, 10.0).data()[0] - 1.1).abs() < 1e-15);
    }
}
