use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{gemm, gemm_raw, Matrix, Operand};
use super::{Param, Parameterized};
use crate::error::{check_dim, Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU, `0.5x(1 + tanh u)` with `u = √(2/π)(x + 0.044715x³)`.
/// Evaluated as `x·σ(2u)`, which is the same function.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * squash(x)
}

#[inline]
fn squash(x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_K * x * x * x)).exp())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let s = squash(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Gelu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => gelu(x),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Gelu => gelu_grad(x),
        }
    }
}

/// One affine layer `y = act(x W + b)` with `W` stored `[in, out]` row-major.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let w = (0..input * output)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            weight: Param::new(vec![input, output], w),
            bias: Param::zeros(vec![output]),
            activation,
        }
    }

    pub fn from_parts(weight: Vec<f64>, bias: Vec<f64>, input: usize, activation: Activation) -> Result<Self> {
        let output = bias.len();
        check_dim("Dense::from_parts", input * output, weight.len())?;
        Ok(Self {
            weight: Param::new(vec![input, output], weight),
            bias: Param::new(vec![output], bias),
            activation,
        })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    /// Pre-activation `x W + b`.
    fn affine(&self, x: &Matrix) -> Matrix {
        let mut pre = Matrix::zeros(x.rows(), self.output_dim());
        for i in 0..x.rows() {
            pre.row_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(
            1.0,
            Operand::plain(x),
            Operand::raw(&self.weight.value, self.input_dim(), self.output_dim(), false),
            1.0,
            &mut pre,
        );
        pre
    }

    fn activate(&self, pre: &Matrix) -> Matrix {
        let mut out = pre.clone();
        if self.activation != Activation::Identity {
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = self.activation.apply(*v));
        }
        out
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("Dense::forward", self.input_dim(), x.cols())?;
        Ok(self.activate(&self.affine(x)))
    }
}

/// Per-layer record of a forward pass, consumed by [`DenseNet::backward`].
#[derive(Clone, Debug)]
pub struct DenseTape {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl DenseTape {
    pub fn batch(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// Backward through one layer. Parameter gradients are accumulated only when
/// the sinks are provided.
fn layer_backward(
    layer_w: &[f64],
    shape: (usize, usize),
    activation: Activation,
    input: &Matrix,
    pre: &Matrix,
    dy: &Matrix,
    sinks: Option<(&mut [f64], &mut [f64])>,
) -> Matrix {
    let (n_in, n_out) = shape;
    let mut dpre = dy.clone();
    if activation != Activation::Identity {
        for (g, p) in dpre.data_mut().iter_mut().zip(pre.data()) {
            *g *= activation.derivative(*p);
        }
    }
    if let Some((wgrad, bgrad)) = sinks {
        gemm_raw(
            1.0,
            Operand::transposed(input),
            Operand::plain(&dpre),
            1.0,
            wgrad,
            n_in,
            n_out,
        );
        for i in 0..dpre.rows() {
            for (g, d) in bgrad.iter_mut().zip(dpre.row(i)) {
                *g += d;
            }
        }
    }
    let mut dx = Matrix::zeros(dpre.rows(), n_in);
    gemm(
        1.0,
        Operand::plain(&dpre),
        Operand::raw(layer_w, n_in, n_out, true),
        0.0,
        &mut dx,
    );
    dx
}

/// Fully connected feed-forward network.
#[derive(Clone, Debug)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
    pub frozen: bool,
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("DenseNet needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("DenseNet::new", pair[0].output_dim(), pair[1].input_dim())?;
        }
        Ok(Self {
            layers,
            frozen: false,
        })
    }

    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last uses `last`.
    pub fn mlp<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "mlp needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                Dense::glorot(sizes[i], sizes[i + 1], act, rng)
            })
            .collect();
        Self {
            layers,
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("DenseNet::forward", self.input_dim(), x.cols())?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Single-vector convenience over [`forward`](Self::forward).
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(x))?.into_vec())
    }

    pub fn forward_recorded(&self, x: &Matrix) -> Result<(Matrix, DenseTape)> {
        check_dim("DenseNet::forward", self.input_dim(), x.cols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = layer.affine(&h);
            let out = layer.activate(&pre);
            inputs.push(h);
            pres.push(pre);
            h = out;
        }
        Ok((h, DenseTape { inputs, pre: pres }))
    }

    fn check_tape(&self, tape: &DenseTape, dy: &Matrix) -> Result<()> {
        check_dim("DenseNet::backward layers", self.layers.len(), tape.inputs.len())?;
        check_dim("DenseNet::backward cols", self.output_dim(), dy.cols())?;
        check_dim("DenseNet::backward rows", tape.batch(), dy.rows())?;
        for (layer, input) in self.layers.iter().zip(&tape.inputs) {
            check_dim("DenseNet::backward tape", layer.input_dim(), input.cols())?;
        }
        Ok(())
    }

    /// Accumulates parameter gradients (unless frozen) and returns the input gradient.
    pub fn backward(&mut self, tape: &DenseTape, dy: &Matrix) -> Result<Matrix> {
        self.check_tape(tape, dy)?;
        let accumulate = !self.frozen;
        let mut g = dy.clone();
        for (idx, layer) in self.layers.iter_mut().enumerate().rev() {
            let shape = (layer.input_dim(), layer.output_dim());
            let Dense {
                weight,
                bias,
                activation,
            } = layer;
            let sinks = accumulate.then(|| (weight.grad.as_mut_slice(), bias.grad.as_mut_slice()));
            g = layer_backward(
                &weight.value,
                shape,
                *activation,
                &tape.inputs[idx],
                &tape.pre[idx],
                &g,
                sinks,
            );
        }
        Ok(g)
    }

    /// Input gradient only; parameters and their gradients are untouched.
    pub fn input_grad(&self, tape: &DenseTape, dy: &Matrix) -> Result<Matrix> {
        self.check_tape(tape, dy)?;
        let mut g = dy.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            g = layer_backward(
                &layer.weight.value,
                (layer.input_dim(), layer.output_dim()),
                layer.activation,
                &tape.inputs[idx],
                &tape.pre[idx],
                &g,
                None,
            );
        }
        Ok(g)
    }
}

impl Parameterized for DenseNet {
    fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = Dense::from_parts(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, Activation::Identity).unwrap();
        let net = DenseNet::new(vec![layer]).unwrap();
        assert_eq!(net.forward_vec(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn gelu_at_zero_and_asymptote() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        let layer = Dense::from_parts(vec![0.3, -0.2], vec![0.0], 2, Activation::Gelu).unwrap();
        let net = DenseNet::new(vec![layer]).unwrap();
        assert_eq!(net.forward_vec(&[0.0, 0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn gelu_matches_quadrature_of_gaussian_cdf() {
        // Phi(1) by composite Simpson on the standard normal density over [-12, 1].
        // The tanh form differs from x·Phi(x) by about 1.5e-4 at x = 1.
        let n = 20_000;
        let (a, b) = (-12.0_f64, 1.0_f64);
        let h = (b - a) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(a) + pdf(b);
        for k in 1..n {
            let t = a + k as f64 * h;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
        }
        let phi = s * h / 3.0;
        assert!((gelu(1.0) - phi).abs() < 5e-4);
    }

    #[test]
    fn gelu_monotone_right_of_minus_half() {
        let mut prev = gelu(-0.5);
        for k in 1..2000 {
            let x = -0.5 + k as f64 * 0.005;
            let y = gelu(x);
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for k in -40..40 {
            let x = k as f64 * 0.17;
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn two_layer_net_matches_hand_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::mlp(&[3, 4, 2], Activation::Gelu, Activation::Identity, &mut rng);
        let x = [0.4, -1.2, 0.9];
        let out = net.forward_vec(&x).unwrap();

        // Straight-line recomputation: explicit loops over the stored weights.
        let l0 = &net.layers[0];
        let mut h = [0.0; 4];
        for j in 0..4 {
            let mut s = l0.bias.value[j];
            for i in 0..3 {
                s += x[i] * l0.weight.value[i * 4 + j];
            }
            h[j] = 0.5 * s * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (s + 0.044715 * s.powi(3))).tanh());
        }
        let l1 = &net.layers[1];
        for j in 0..2 {
            let mut s = l1.bias.value[j];
            for i in 0..4 {
                s += h[i] * l1.weight.value[i * 2 + j];
            }
            assert!((out[j] - s).abs() < 1e-13);
        }
    }

    #[test]
    fn linear_weight_gradient_equals_input() {
        let layer = Dense::from_parts(vec![0.5, -0.3], vec![0.1], 2, Activation::Identity).unwrap();
        let mut net = DenseNet::new(vec![layer]).unwrap();
        let x = Matrix::row_vector(&[2.0, -7.0]);
        let (_, tape) = net.forward_recorded(&x).unwrap();
        net.backward(&tape, &Matrix::row_vector(&[1.0])).unwrap();
        assert_eq!(net.layers[0].weight.grad, vec![2.0, -7.0]);
        assert_eq!(net.layers[0].bias.grad, vec![1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = DenseNet::mlp(&[3, 5, 2], Activation::Gelu, Activation::Identity, &mut rng);
        let x = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let (_, tape) = net.forward_recorded(&x).unwrap();
        let dx = net.backward(&tape, &Matrix::zeros(2, 2)).unwrap();
        assert!(dx.data().iter().all(|v| *v == 0.0));
        assert!(net.params().iter().all(|p| p.grad.iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn frozen_net_accumulates_nothing_but_passes_input_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DenseNet::mlp(&[2, 3, 1], Activation::Gelu, Activation::Identity, &mut rng).frozen();
        let x = Matrix::row_vector(&[0.3, -0.8]);
        let (_, tape) = net.forward_recorded(&x).unwrap();
        let dx = net.backward(&tape, &Matrix::row_vector(&[1.0])).unwrap();
        assert!(dx.data().iter().any(|v| *v != 0.0));
        assert!(net.params().iter().all(|p| p.grad.iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn mismatched_tape_or_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DenseNet::mlp(&[2, 3, 1], Activation::Gelu, Activation::Identity, &mut rng);
        assert!(net.forward_vec(&[1.0]).is_err());
        let (_, tape) = net.forward_recorded(&Matrix::zeros(4, 2)).unwrap();
        assert!(net.backward(&tape, &Matrix::zeros(3, 1)).is_err());
        let other = DenseNet::mlp(&[2, 3, 3, 1], Activation::Gelu, Activation::Identity, &mut rng);
        let (_, foreign) = other.forward_recorded(&Matrix::zeros(4, 2)).unwrap();
        assert!(net.backward(&foreign, &Matrix::zeros(4, 1)).is_err());
    }
}
