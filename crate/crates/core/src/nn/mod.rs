//! Dense-network substrate: batched forward passes, reverse-mode gradients for
//! the fixed architectures used by the agent, Adam, and checkpoints.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod dense;
pub mod encoder;
pub mod matrix;

pub use adam::{AdamState, LrSchedule};
pub use attention::AttentionPool;
pub use checkpoint::Checkpoint;
pub use dense::{gelu, Activation, Dense, DenseNet, DenseTape};
pub use encoder::{EncoderKind, ObsLayout, StateEncoder};
pub use matrix::Matrix;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape");
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }
}

/// Enumerates parameters in a stable order (used by Adam, Polyak averaging and checkpoints).
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn is_frozen(&self) -> bool {
        false
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in enumeration order.
    fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }
}

/// `target ← (1 − rate)·target + rate·online`, parameter-wise.
pub fn soft_update<M: Parameterized + ?Sized>(target: &mut M, online: &M, rate: f64) {
    assert!(rate > 0.0 && rate <= 1.0, "polyak rate must lie in (0, 1]");
    for (t, o) in target.params_mut().into_iter().zip(online.params()) {
        assert_eq!(t.value.len(), o.value.len());
        if rate == 1.0 {
            t.value.copy_from_slice(&o.value);
        } else {
            for (tv, ov) in t.value.iter_mut().zip(&o.value) {
                *tv = (1.0 - rate) * *tv + rate * ov;
            }
        }
    }
}
