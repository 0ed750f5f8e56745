//! Sequential layer stack with cached activations for the backward pass.

use crate::conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, ConvGeometry,
};
use crate::error::{NumError, Result};
use crate::layer::{Init, LayerParams, Parameterized};
use crate::linear::{linear_backward, linear_forward};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Linear(LayerParams<T>),
    Conv2d(LayerParams<T>, ConvGeometry),
    ConvTranspose2d(LayerParams<T>, ConvGeometry),
    Tanh,
    /// Reshapes every batch item; the leading batch axis is preserved.
    Reshape(Vec<usize>),
}

impl<T: Scalar> Layer<T> {
    pub fn linear(inp: usize, out: usize, init: Init, rng: &mut Rng) -> Self {
        Layer::Linear(LayerParams::init(&[inp, out], out, inp, init, rng))
    }

    pub fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, init: Init, rng: &mut Rng) -> Self {
        Layer::Conv2d(
            LayerParams::init(&[c_out, c_in, k, k], c_out, c_in * k * k, init, rng),
            ConvGeometry::new(stride, pad),
        )
    }

    pub fn deconv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, init: Init, rng: &mut Rng) -> Self {
        // fan-in of a stride-s transposed conv is roughly c_in·k²/s²
        let fan_in = (c_in * k * k / (stride * stride)).max(1);
        Layer::ConvTranspose2d(
            LayerParams::init(&[c_in, c_out, k, k], c_out, fan_in, init, rng),
            ConvGeometry::new(stride, pad),
        )
    }

    pub fn params(&self) -> Option<&LayerParams<T>> {
        match self {
            Layer::Linear(p) | Layer::Conv2d(p, _) | Layer::ConvTranspose2d(p, _) => Some(p),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        match self {
            Layer::Linear(p) | Layer::Conv2d(p, _) | Layer::ConvTranspose2d(p, _) => Some(p),
            _ => None,
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Linear(p) => linear_forward(x, p),
            Layer::Conv2d(p, g) => conv2d_forward(x, p, *g),
            Layer::ConvTranspose2d(p, g) => conv_transpose2d_forward(x, p, *g),
            Layer::Tanh => Ok(Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| v.tanh()).collect(),
            )?),
            Layer::Reshape(shape) => {
                let mut full = vec![x.dim(0)];
                full.extend_from_slice(shape);
                x.clone().reshape(&full)
            }
        }
    }

    /// `input` is what `forward` consumed, `output` what it produced.
    fn backward(&mut self, input: &Tensor<T>, output: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Linear(p) => linear_backward(input, p, grad),
            Layer::Conv2d(p, g) => conv2d_backward(input, p, *g, grad),
            Layer::ConvTranspose2d(p, g) => conv_transpose2d_backward(input, p, *g, grad),
            Layer::Tanh => {
                let data = output
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(y, g)| *g * (T::one() - *y * *y))
                    .collect();
                Tensor::new(output.shape().to_vec(), data)
            }
            Layer::Reshape(_) => grad.clone().reshape(input.shape()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Linear(p) => Layer::Linear(p.cast()),
            Layer::Conv2d(p, g) => Layer::Conv2d(p.cast(), *g),
            Layer::ConvTranspose2d(p, g) => Layer::ConvTranspose2d(p.cast(), *g),
            Layer::Tanh => Layer::Tanh,
            Layer::Reshape(s) => Layer::Reshape(s.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T = f32> {
    name: String,
    layers: Vec<Layer<T>>,
    // inputs[i] feeds layers[i]; inputs[len] is the final output
    trace: Vec<Tensor<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            layers: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn push(mut self, layer: Layer<T>) -> Self {
        self.layers.push(layer);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Forward pass without recording activations.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Forward pass that records activations for [`Sequential::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.trace.clear();
        self.trace.push(x.clone());
        for l in &self.layers {
            let next = l.forward(self.trace.last().expect("trace seeded"))?;
            self.trace.push(next);
        }
        Ok(self.trace.last().expect("trace seeded").clone())
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input
    /// of the most recent [`Sequential::forward`].
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        if self.trace.len() != self.layers.len() + 1 {
            return Err(NumError::Config(format!("{}: backward without forward", self.name)));
        }
        let mut g = grad.clone();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&self.trace[i], &self.trace[i + 1], &g)?;
        }
        Ok(g)
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            name: self.name.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            trace: Vec::new(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Sequential<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &LayerParams<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(p) = l.params() {
                f(&format!("{}.{}", self.name, i), p);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut LayerParams<T>)) {
        let name = self.name.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(p) = l.params_mut() {
                f(&format!("{name}.{i}"), p);
            }
        }
    }
}
