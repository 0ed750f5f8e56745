use crate::error::{NumError, Result};
use crate::layer::{LayerParams, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one [`LayerParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m_w: Tensor<T>,
    pub v_w: Tensor<T>,
    pub m_b: Tensor<T>,
    pub v_b: Tensor<T>,
    pub step_count: u64,
    pub cfg: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(p: &LayerParams<T>, cfg: AdamConfig) -> Self {
        Self {
            m_w: Tensor::zeros(p.weights.shape()),
            v_w: Tensor::zeros(p.weights.shape()),
            m_b: Tensor::zeros(p.biases.shape()),
            v_b: Tensor::zeros(p.biases.shape()),
            step_count: 0,
            cfg,
        }
    }
}

fn update<T: Scalar>(w: &mut [T], g: &[T], m: &mut [T], v: &mut [T], cfg: &AdamConfig, t: u64) {
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
    }
}

/// One bias-corrected Adam update; gradients are zeroed afterwards.
///
/// A non-finite gradient aborts before any parameter is touched.
pub fn adam_step<T: Scalar>(layer: &str, p: &mut LayerParams<T>, s: &mut AdamState<T>) -> Result<()> {
    if !p.grad_w.is_finite() || !p.grad_b.is_finite() {
        return Err(NumError::Divergence { layer: layer.to_string() });
    }
    s.step_count += 1;
    let t = s.step_count;
    update(p.weights.data_mut(), p.grad_w.data(), s.m_w.data_mut(), s.v_w.data_mut(), &s.cfg, t);
    update(p.biases.data_mut(), p.grad_b.data(), s.m_b.data_mut(), s.v_b.data_mut(), &s.cfg, t);
    p.zero_grad();
    Ok(())
}

/// Adam over every parameter block of a model, in visiting order.
#[derive(Clone, Debug)]
pub struct Optimizer<T = f32> {
    states: Vec<AdamState<T>>,
    cfg: AdamConfig,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new<M: Parameterized<T> + ?Sized>(model: &M, cfg: AdamConfig) -> Self {
        let mut states = Vec::new();
        model.visit_params(&mut |_, p| states.push(AdamState::new(p, cfg)));
        Self { states, cfg }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        let states = &mut self.states;
        model.visit_params_mut(&mut |name, p| {
            if err.is_none() {
                if let Err(e) = adam_step(name, p, &mut states[i]) {
                    err = Some(e);
                }
            }
            i += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
