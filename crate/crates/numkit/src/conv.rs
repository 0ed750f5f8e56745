//! 2D convolution (cross-correlation) and transposed convolution.
//!
//! Activations are `[B, C, H, W]`. Convolution weights are `[O, C, K, K]`,
//! transposed-convolution weights are `[C_in, C_out, K, K]`. Both lower to
//! im2col + GEMM per batch item.

use crate::error::{shape_err, NumError, Result};
use crate::gemm::{gemm, Op};
use crate::layer::LayerParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }
}

/// `floor((n + 2·pad − k) / stride) + 1`, or a configuration error when the
/// kernel does not fit the padded input.
pub fn conv2d_output_size(n: usize, k: usize, g: ConvGeometry) -> Result<usize> {
    if g.stride == 0 {
        return Err(NumError::Config("stride must be >= 1".into()));
    }
    if k == 0 || n + 2 * g.pad < k {
        return Err(NumError::Config(format!(
            "kernel {k} does not fit input {n} with padding {}",
            g.pad
        )));
    }
    Ok((n + 2 * g.pad - k) / g.stride + 1)
}

/// `(n − 1)·stride − 2·pad + k`
pub fn conv_transpose2d_output_size(n: usize, k: usize, g: ConvGeometry) -> Result<usize> {
    if g.stride == 0 || n == 0 {
        return Err(NumError::Config("stride and input size must be >= 1".into()));
    }
    let full = (n - 1) * g.stride + k;
    if full <= 2 * g.pad {
        return Err(NumError::Config(format!(
            "transposed conv output is empty (input {n}, kernel {k}, pad {})",
            g.pad
        )));
    }
    Ok(full - 2 * g.pad)
}

struct Plane {
    c: usize,
    h: usize,
    w: usize,
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], p: &Plane, k: usize, g: ConvGeometry, ho: usize, wo: usize, cols: &mut [T]) {
    let n_out = ho * wo;
    for c in 0..p.c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= p.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * p.h + iy as usize) * p.w..(c * p.h + iy as usize + 1) * p.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= p.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]; `x` must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], p: &Plane, k: usize, g: ConvGeometry, ho: usize, wo: usize, x: &mut [T]) {
    let n_out = ho * wo;
    for c in 0..p.c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= p.h as isize {
                        continue;
                    }
                    let base = (c * p.h + iy as usize) * p.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < p.w {
                            let d = &mut x[base + ix as usize];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv<T: Scalar>(op: &'static str, x: &Tensor<T>, p: &LayerParams<T>) -> Result<(usize, usize, usize)> {
    let w = p.weights.shape();
    if x.ndim() != 4 || w.len() != 4 || w[2] != w[3] || x.dim(1) != w[1] || p.biases.len() != w[0] {
        return shape_err(op, w, x.shape());
    }
    Ok((w[0], w[1], w[2]))
}

/// Standard cross-correlation with zero padding.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>, g: ConvGeometry) -> Result<Tensor<T>> {
    let (o, c, k) = check_conv("conv2d_forward", x, p)?;
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let ho = conv2d_output_size(h, k, g)?;
    let wo = conv2d_output_size(w, k, g)?;
    let plane = Plane { c, h, w };
    let ckk = c * k * k;
    let n_out = ho * wo;
    let mut cols = vec![T::zero(); ckk * n_out];
    let mut out = Tensor::zeros(&[b, o, ho, wo]);
    for bi in 0..b {
        im2col(x.row(bi), &plane, k, g, ho, wo, &mut cols);
        let dst = out.row_mut(bi);
        for (oc, chunk) in dst.chunks_mut(n_out).enumerate() {
            chunk.iter_mut().for_each(|v| *v = p.biases.data()[oc]);
        }
        gemm(o, ckk, n_out, p.weights.data(), Op::N, &cols, Op::N, dst, true);
    }
    Ok(out)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut LayerParams<T>,
    g: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (o, c, k) = check_conv("conv2d_backward", x, p)?;
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let ho = conv2d_output_size(h, k, g)?;
    let wo = conv2d_output_size(w, k, g)?;
    if grad_out.shape() != [b, o, ho, wo] {
        return shape_err("conv2d_backward", &[b, o, ho, wo], grad_out.shape());
    }
    let plane = Plane { c, h, w };
    let ckk = c * k * k;
    let n_out = ho * wo;
    let mut cols = vec![T::zero(); ckk * n_out];
    let mut grad_cols = vec![T::zero(); ckk * n_out];
    let mut grad_x = Tensor::zeros(x.shape());
    for bi in 0..b {
        let go = grad_out.row(bi);
        im2col(x.row(bi), &plane, k, g, ho, wo, &mut cols);
        gemm(o, n_out, ckk, go, Op::N, &cols, Op::T, p.grad_w.data_mut(), true);
        let gb = p.grad_b.data_mut();
        for (oc, chunk) in go.chunks(n_out).enumerate() {
            gb[oc] = gb[oc] + chunk.iter().copied().sum::<T>();
        }
        gemm(ckk, o, n_out, p.weights.data(), Op::T, go, Op::N, &mut grad_cols, false);
        col2im(&grad_cols, &plane, k, g, ho, wo, grad_x.row_mut(bi));
    }
    Ok(grad_x)
}

fn check_deconv<T: Scalar>(op: &'static str, x: &Tensor<T>, p: &LayerParams<T>) -> Result<(usize, usize, usize)> {
    let w = p.weights.shape();
    if x.ndim() != 4 || w.len() != 4 || w[2] != w[3] || x.dim(1) != w[0] || p.biases.len() != w[1] {
        return shape_err(op, w, x.shape());
    }
    Ok((w[0], w[1], w[2]))
}

/// Transposed convolution (the adjoint of [`conv2d_forward`] w.r.t. its input), plus bias.
pub fn conv_transpose2d_forward<T: Scalar>(x: &Tensor<T>, p: &LayerParams<T>, g: ConvGeometry) -> Result<Tensor<T>> {
    let (ci, co, k) = check_deconv("conv_transpose2d_forward", x, p)?;
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let ho = conv_transpose2d_output_size(h, k, g)?;
    let wo = conv_transpose2d_output_size(w, k, g)?;
    // The output plane maps back onto the input grid through an ordinary conv.
    if conv2d_output_size(ho, k, g)? != h || conv2d_output_size(wo, k, g)? != w {
        return Err(NumError::Config("transposed conv geometry is not invertible".into()));
    }
    let plane = Plane { c: co, h: ho, w: wo };
    let ckk = co * k * k;
    let n_in = h * w;
    let mut cols = vec![T::zero(); ckk * n_in];
    let mut out = Tensor::zeros(&[b, co, ho, wo]);
    for bi in 0..b {
        gemm(ckk, ci, n_in, p.weights.data(), Op::T, x.row(bi), Op::N, &mut cols, false);
        let dst = out.row_mut(bi);
        col2im(&cols, &plane, k, g, h, w, dst);
        for (oc, chunk) in dst.chunks_mut(ho * wo).enumerate() {
            let bias = p.biases.data()[oc];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &mut LayerParams<T>,
    g: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (ci, co, k) = check_deconv("conv_transpose2d_backward", x, p)?;
    let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let ho = conv_transpose2d_output_size(h, k, g)?;
    let wo = conv_transpose2d_output_size(w, k, g)?;
    if grad_out.shape() != [b, co, ho, wo] {
        return shape_err("conv_transpose2d_backward", &[b, co, ho, wo], grad_out.shape());
    }
    let plane = Plane { c: co, h: ho, w: wo };
    let ckk = co * k * k;
    let n_in = h * w;
    let mut grad_cols = vec![T::zero(); ckk * n_in];
    let mut grad_x = Tensor::zeros(x.shape());
    for bi in 0..b {
        let go = grad_out.row(bi);
        im2col(go, &plane, k, g, h, w, &mut grad_cols);
        gemm(ci, ckk, n_in, p.weights.data(), Op::N, &grad_cols, Op::N, grad_x.row_mut(bi), false);
        gemm(ci, n_in, ckk, x.row(bi), Op::N, &grad_cols, Op::T, p.grad_w.data_mut(), true);
        let gb = p.grad_b.data_mut();
        for (oc, chunk) in go.chunks(ho * wo).enumerate() {
            gb[oc] = gb[oc] + chunk.iter().copied().sum::<T>();
        }
    }
    Ok(grad_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_params(shape: &[usize], nb: usize, rng: &mut Rng) -> LayerParams<f32> {
        LayerParams::new(
            Tensor::from_fn(shape, |_| rng.normal_f32()),
            Tensor::from_fn(&[nb], |_| rng.normal_f32()),
        )
    }

    #[test]
    fn ones_kernel_sums_ones() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |_| 1.0);
        let p = LayerParams::new(Tensor::from_fn(&[1, 1, 3, 3], |_| 1.0), Tensor::zeros(&[1]));
        let y = conv2d_forward(&x, &p, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn impulse_response_is_flipped_kernel() {
        let k = 3;
        let x = Tensor::<f32>::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let w: Vec<f32> = (0..9).map(|i| i as f32 + 1.0).collect();
        let p = LayerParams::new(Tensor::new(vec![1, 1, k, k], w.clone()).unwrap(), Tensor::zeros(&[1]));
        let y = conv2d_forward(&x, &p, ConvGeometry::new(1, k - 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, k, k]);
        for oy in 0..k {
            for ox in 0..k {
                assert_eq!(y.data()[oy * k + ox], w[(k - 1 - oy) * k + (k - 1 - ox)]);
            }
        }
    }

    #[test]
    fn output_size_errors_when_kernel_too_big() {
        assert!(conv2d_output_size(2, 5, ConvGeometry::new(1, 1)).is_err());
        assert!(conv2d_output_size(4, 3, ConvGeometry::new(0, 0)).is_err());
        assert_eq!(conv2d_output_size(8, 3, ConvGeometry::new(2, 0)).unwrap(), 3);
        assert_eq!(conv2d_output_size(32, 4, ConvGeometry::new(2, 1)).unwrap(), 16);
        assert_eq!(conv_transpose2d_output_size(16, 4, ConvGeometry::new(2, 1)).unwrap(), 32);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights and zero bias.
        let mut rng = Rng::new(11);
        let g = ConvGeometry::new(2, 1);
        let x = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |_| rng.normal());
        let w = Tensor::<f64>::from_fn(&[4, 3, 4, 4], |_| rng.normal());
        let conv_p = LayerParams::new(w.clone(), Tensor::zeros(&[4]));
        let y = conv2d_forward(&x, &conv_p, g).unwrap();
        let r = Tensor::<f64>::from_fn(y.shape(), |_| rng.normal());
        let deconv_p = LayerParams::new(w, Tensor::zeros(&[3]));
        let xt = conv_transpose2d_forward(&r, &deconv_p, g).unwrap();
        assert_eq!(xt.shape(), x.shape());
        let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn random_conv_matches_nested_loop_oracle() {
        let mut rng = Rng::new(5);
        let (b, c, h, w, o, k) = (2, 3, 8, 8, 4, 3);
        let g = ConvGeometry::new(2, 0);
        let x = Tensor::from_fn(&[b, c, h, w], |_| rng.normal_f32());
        let p = rand_params(&[o, c, k, k], o, &mut rng);
        let y = conv2d_forward(&x, &p, g).unwrap();
        let ho = (h - k) / 2 + 1;
        let wo = (w - k) / 2 + 1;
        let xd = x.data();
        let wd = p.weights.data();
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = p.biases.data()[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    s += xd[((bi * c + ic) * h + oy * 2 + ki) * w + ox * 2 + kj]
                                        * wd[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                        let got = y.data()[((bi * o + oc) * ho + oy) * wo + ox];
                        assert!((got - s).abs() < 1e-5, "{got} vs {s}");
                    }
                }
            }
        }
    }
}
