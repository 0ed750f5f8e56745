//! Fully-connected layer kernels. Weights are stored `[in, out]`.

use crate::error::{shape_err, Result};
use crate::gemm::{gemm, Op};
use crate::layer::LayerParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims<T: Scalar>(op: &'static str, x: &Tensor<T>, p: &LayerParams<T>) -> Result<(usize, usize, usize)> {
    let w = p.weights.shape();
    if x.ndim() != 2 || w.len() != 2 || x.dim(1) != w[0] || p.biases.len() != w[1] {
        return shape_err(op, w, x.shape());
    }
    Ok((x.dim(0), w[0], w[1]))
}

/// `out = x · W + b` for `x: [B, I]`, `W: [I, O]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>) -> Result<Tensor<T>> {
    let (b, i, o) = dims("linear_forward", x, p)?;
    let mut out = Tensor::zeros(&[b, o]);
    for r in 0..b {
        out.row_mut(r).copy_from_slice(p.biases.data());
    }
    gemm(b, i, o, x.data(), Op::N, p.weights.data(), Op::N, out.data_mut(), true);
    Ok(out)
}

/// Accumulates `gradW += xᵀ·grad_out`, `gradB += colsum(grad_out)` and
/// returns `grad_x = grad_out·Wᵀ`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut LayerParams<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, i, o) = dims("linear_backward", x, p)?;
    if grad_out.shape() != [b, o] {
        return shape_err("linear_backward", &[b, o], grad_out.shape());
    }
    gemm(i, b, o, x.data(), Op::T, grad_out.data(), Op::N, p.grad_w.data_mut(), true);
    let gb = p.grad_b.data_mut();
    for r in 0..b {
        for (acc, g) in gb.iter_mut().zip(grad_out.row(r)) {
            *acc = *acc + *g;
        }
    }
    let mut grad_x = Tensor::zeros(&[b, i]);
    gemm(b, o, i, grad_out.data(), Op::N, p.weights.data(), Op::T, grad_x.data_mut(), false);
    Ok(grad_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn params(w: Vec<f64>, i: usize, o: usize, b: Vec<f64>) -> LayerParams<f64> {
        LayerParams::new(Tensor::new(vec![i, o], w).unwrap(), Tensor::new(vec![o], b).unwrap())
    }

    #[test]
    fn identity_rows_select_weight_rows() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = params(vec![2.0, 3.0, 4.0, 5.0], 2, 2, vec![0.0, 0.0]);
        let y = linear_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn zero_input_passes_bias() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::zeros(&[1, 4]);
        let w: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let p = params(w, 4, 1, vec![7.0]);
        assert_eq!(linear_forward(&x, &p).unwrap().data(), &[7.0]);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = Rng::new(7);
        let (b, i, o) = (3, 5, 2);
        let x = Tensor::<f32>::from_fn(&[b, i], |_| rng.normal_f32());
        let p = LayerParams::new(
            Tensor::from_fn(&[i, o], |_| rng.normal_f32()),
            Tensor::from_fn(&[o], |_| rng.normal_f32()),
        );
        let y = linear_forward(&x, &p).unwrap();
        for r in 0..b {
            for c in 0..o {
                let mut s = p.biases.data()[c];
                for k in 0..i {
                    s += x.data()[r * i + k] * p.weights.data()[k * o + c];
                }
                assert!((y.data()[r * o + c] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scalar_chain_rule() {
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let mut p = params(vec![3.0], 1, 1, vec![0.0]);
        let g = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
        let gx = linear_backward(&x, &mut p, &g).unwrap();
        assert_eq!(p.grad_w.data(), &[10.0]);
        assert_eq!(p.grad_b.data(), &[5.0]);
        assert_eq!(gx.data(), &[15.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::from_fn(&[4, 3], |_| rng.normal());
        let mut p = params((0..6).map(|_| rng.normal()).collect(), 3, 2, vec![0.1, 0.2]);
        let gx = linear_backward(&x, &mut p, &Tensor::zeros(&[4, 2])).unwrap();
        assert!(gx.data().iter().all(|v| *v == 0.0));
        assert!(p.grad_w.data().iter().all(|v| *v == 0.0));
        assert!(p.grad_b.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        let p = LayerParams::new(Tensor::<f32>::zeros(&[4, 2]), Tensor::zeros(&[2]));
        let err = linear_forward(&x, &p).unwrap_err().to_string();
        assert!(err.contains("[4, 2]") && err.contains("[2, 3]"), "{err}");
    }
}
