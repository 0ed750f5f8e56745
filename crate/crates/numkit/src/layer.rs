use crate::error::{NumError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights, biases and their gradient accumulators.
///
/// Gradient buffers always have the same shapes as the values they track.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
    pub grad_w: Tensor<T>,
    pub grad_b: Tensor<T>,
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`
    HeNormal,
    /// `N(0, 1 / fan_in)`
    LecunNormal,
    Zeros,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Tensor<T>, biases: Tensor<T>) -> Self {
        let grad_w = Tensor::zeros(weights.shape());
        let grad_b = Tensor::zeros(biases.shape());
        Self {
            weights,
            biases,
            grad_w,
            grad_b,
        }
    }

    pub fn init(w_shape: &[usize], n_bias: usize, fan_in: usize, init: Init, rng: &mut Rng) -> Self {
        let std = match init {
            Init::HeNormal => (2.0 / fan_in as f64).sqrt(),
            Init::LecunNormal => (1.0 / fan_in as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let weights = Tensor::from_fn(w_shape, |_| {
            if std == 0.0 {
                T::zero()
            } else {
                T::of(rng.normal() * std)
            }
        });
        Self::new(weights, Tensor::zeros(&[n_bias]))
    }

    pub fn zero_grad(&mut self) {
        self.grad_w.fill(T::zero());
        self.grad_b.fill(T::zero());
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            weights: self.weights.cast(),
            biases: self.biases.cast(),
            grad_w: self.grad_w.cast(),
            grad_b: self.grad_b.cast(),
        }
    }
}

/// Ordered access to every parameter block of a model.
///
/// Visiting order must be stable: optimizers and serializers index by it.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &LayerParams<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut LayerParams<T>));

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.num_params());
        n
    }

    /// All weights and biases flattened in visiting order.
    fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, p| {
            out.extend_from_slice(p.weights.data());
            out.extend_from_slice(p.biases.data());
        });
        out
    }

    /// Inverse of [`Parameterized::flat_params`].
    fn load_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(NumError::Format(format!(
                "expected {expected} parameters, got {}",
                flat.len()
            )));
        }
        let mut off = 0;
        self.visit_params_mut(&mut |_, p| {
            let nw = p.weights.len();
            p.weights.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = p.biases.len();
            p.biases.data_mut().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        });
        Ok(())
    }
}
