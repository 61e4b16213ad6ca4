//! 2-D cross-correlation with zero padding, plus its adjoints.
//!
//! The forward pass is the standard "convolution" of deep-learning layers
//! (no kernel flip). Loop order is fixed — batch, output channel, output row,
//! output column, then input channel and kernel rows/cols — so accumulation
//! is deterministic.

use super::{check_same_shape, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;
use alloc::vec;
use alloc::vec::Vec;

/// Weights and geometry of one convolution layer.
#[derive(Debug, Clone)]
pub struct ConvSpec<T: Scalar> {
    /// `[Cout, Cin, kH, kW]`.
    pub kernel: Tensor<T>,
    /// `[Cout]`.
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let (cout, _cin, _kh, _kw) = kernel.dims4()?;
        if bias.shape() != [cout] {
            return Err(shape_err!(
                "conv bias shape {:?} does not match {cout} output channels",
                bias.shape()
            ));
        }
        if stride == 0 {
            return Err(domain_err!("conv stride must be positive"));
        }
        Ok(ConvSpec {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.kernel.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Output spatial size of a padded strided correlation.
fn out_extent(input: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(shape_err!(
            "spatial extent {input} (+2·{pad} padding) smaller than kernel {k}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Standard zero-padded cross-correlation with per-output-channel bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = spec.dims();
    if cin != kcin {
        return Err(shape_err!(
            "conv2d: input has {cin} channels, kernel expects {kcin}"
        ));
    }
    let oh = out_extent(h, kh, spec.padding, spec.stride)?;
    let ow = out_extent(w, kw, spec.padding, spec.stride)?;
    let pad = spec.padding as isize;
    let k = spec.kernel.as_slice();
    let x = input.as_slice();
    let bias = spec.bias.as_slice();

    let mut out = Vec::with_capacity(n * cout * oh * ow);
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ci) * h + iy as usize) * w + ix as usize;
                                let ki = ((co * kcin + ci) * kh + ky) * kw + kx;
                                acc = acc + x[xi] * k[ki];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, cout, oh, ow], out))
}

/// Cotangent of the input: scatter of `cot · kernel` through the forward
/// index map (works for any stride).
pub fn conv2d_vjp_input<T: Scalar>(
    cot: &Tensor<T>,
    spec: &ConvSpec<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (n, cout, oh, ow) = cot.dims4()?;
    let (kcout, cin, kh, kw) = spec.dims();
    debug_assert_eq!(cout, kcout);
    let (h, w) = (input_shape[2], input_shape[3]);
    let pad = spec.padding as isize;
    let k = spec.kernel.as_slice();
    let g = cot.as_slice();

    let mut din = vec![T::zero(); input_shape.iter().product()];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[((ni * cout + co) * oh + oy) * ow + ox];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ci) * h + iy as usize) * w + ix as usize;
                                let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                din[xi] = din[xi] + gv * k[ki];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape, din))
}

/// Cotangent of the kernel.
pub fn conv2d_vjp_kernel<T: Scalar>(
    cot: &Tensor<T>,
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
) -> Result<Tensor<T>> {
    let (n, cout, oh, ow) = cot.dims4()?;
    let (_, cin, kh, kw) = spec.dims();
    let (_, _, h, w) = input.dims4()?;
    let pad = spec.padding as isize;
    let x = input.as_slice();
    let g = cot.as_slice();

    let mut dk = vec![T::zero(); cout * cin * kh * kw];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[((ni * cout + co) * oh + oy) * ow + ox];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ci) * h + iy as usize) * w + ix as usize;
                                let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                dk[ki] = dk[ki] + gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[cout, cin, kh, kw], dk))
}

/// Cotangent of the bias: sum of the cotangent over batch and space.
pub fn conv2d_vjp_bias<T: Scalar>(cot: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cout, oh, ow) = cot.dims4()?;
    let g = cot.as_slice();
    let mut db = vec![T::zero(); cout];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    db[co] = db[co] + g[((ni * cout + co) * oh + oy) * ow + ox];
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[cout], db))
}

/// Convenience: checks two tensors share a shape (re-exported for tests).
pub fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    check_same_shape("same_shape", a, b)
}
