//! Differentiable operations recorded on a [`Tape`].
//!
//! Every function computes its value eagerly with the plain tensor kernels
//! (so taped and untaped evaluation are bitwise identical) and registers a
//! VJP closure. Closures capture only ids and small scalars — tensors are
//! read back through the [`BackCtx`] while they are still retained.

use super::tape::{NodeId, Tape};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{self, ConvSpec, Tensor};
use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

/// Group-normalization variance floor.
pub const GROUP_NORM_EPS: f64 = 1e-5;

fn lift<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("internal: shape/data mismatch")
}

// ── Arithmetic ──────────────────────────────────────────────────────────

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let v = tensor::add(tape.value(a)?, tape.value(b)?)?;
    tape.record("add", &[a, b], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            Ok(vec![(a, cot.clone()), (b, cot.clone())])
        }))
    })
}

pub fn sub<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let v = tensor::sub(tape.value(a)?, tape.value(b)?)?;
    tape.record("sub", &[a, b], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            Ok(vec![
                (a, cot.clone()),
                (b, tensor::scale(cot, -T::one())),
            ])
        }))
    })
}

pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let v = tensor::mul(tape.value(a)?, tape.value(b)?)?;
    tape.record("mul", &[a, b], v, None, |_| {
        Some(Box::new(move |ctx, cot| {
            let ga = tensor::mul(cot, ctx.value(b)?)?;
            let gb = tensor::mul(cot, ctx.value(a)?)?;
            Ok(vec![(a, ga), (b, gb)])
        }))
    })
}

pub fn div<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let v = tensor::div(tape.value(a)?, tape.value(b)?)?;
    tape.record("div", &[a, b], v, None, |id| {
        Some(Box::new(move |ctx, cot| {
            let bv = ctx.value(b)?;
            let ga = tensor::div(cot, bv)?;
            // d(a/b)/db = −(a/b)/b; the quotient is this node's own value.
            let gb = tensor::scale(&tensor::div(&tensor::mul(cot, ctx.value(id)?)?, bv)?, -T::one());
            Ok(vec![(a, ga), (b, gb)])
        }))
    })
}

/// Elementwise maximum; ties route half the cotangent to each side.
pub fn maximum<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let v = tensor::maximum(tape.value(a)?, tape.value(b)?)?;
    tape.record("maximum", &[a, b], v, None, |_| {
        Some(Box::new(move |ctx, cot| {
            let av = ctx.value(a)?.as_slice();
            let bv = ctx.value(b)?.as_slice();
            let g = cot.as_slice();
            let half = T::from_f64(0.5);
            let mut ga = Vec::with_capacity(g.len());
            let mut gb = Vec::with_capacity(g.len());
            for i in 0..g.len() {
                if av[i] > bv[i] {
                    ga.push(g[i]);
                    gb.push(T::zero());
                } else if av[i] < bv[i] {
                    ga.push(T::zero());
                    gb.push(g[i]);
                } else {
                    ga.push(g[i] * half);
                    gb.push(g[i] * half);
                }
            }
            let shape = cot.shape().to_vec();
            Ok(vec![(a, lift(&shape, ga)), (b, lift(&shape, gb))])
        }))
    })
}

/// Absolute value; the subgradient at zero is zero.
pub fn abs<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let v = tensor::abs(tape.value(x)?);
    tape.record("abs", &[x], v, None, |_| {
        Some(Box::new(move |ctx, cot| {
            let xs = ctx.value(x)?.as_slice();
            let g = cot.as_slice();
            let out: Vec<T> = (0..g.len())
                .map(|i| {
                    if xs[i] > T::zero() {
                        g[i]
                    } else if xs[i] < T::zero() {
                        -g[i]
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Ok(vec![(x, lift(cot.shape(), out))])
        }))
    })
}

pub fn sqrt<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let v = tensor::sqrt(tape.value(x)?)?;
    tape.record("sqrt", &[x], v, None, |id| {
        Some(Box::new(move |ctx, cot| {
            // d√x/dx = 1/(2√x); the root is this node's own value.
            let two_root = tensor::scale(ctx.value(id)?, T::from_f64(2.0));
            Ok(vec![(x, tensor::div(cot, &two_root)?)])
        }))
    })
}

pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let v = tensor::sigmoid(tape.value(x)?);
    tape.record("sigmoid", &[x], v, None, |id| {
        Some(Box::new(move |ctx, cot| {
            let y = ctx.value(id)?;
            let one_minus = tensor::affine(y, -T::one(), T::one());
            let g = tensor::mul(cot, &tensor::mul(y, &one_minus)?)?;
            Ok(vec![(x, g)])
        }))
    })
}

pub fn silu<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let v = tensor::silu(tape.value(x)?);
    tape.record("silu", &[x], v, None, |_| {
        Some(Box::new(move |ctx, cot| {
            let xs = ctx.value(x)?.as_slice();
            let g = cot.as_slice();
            let out: Vec<T> = (0..g.len())
                .map(|i| {
                    let s = tensor::sigmoid_one(xs[i]);
                    g[i] * (s + xs[i] * s * (T::one() - s))
                })
                .collect();
            Ok(vec![(x, lift(cot.shape(), out))])
        }))
    })
}

pub fn recip<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let v = tensor::recip(tape.value(x)?)?;
    tape.record("recip", &[x], v, None, |id| {
        Some(Box::new(move |ctx, cot| {
            let y = ctx.value(id)?;
            let g = tensor::scale(&tensor::mul(cot, &tensor::mul(y, y)?)?, -T::one());
            Ok(vec![(x, g)])
        }))
    })
}

pub fn scale<T: Scalar>(tape: &mut Tape<T>, x: NodeId, k: T) -> Result<NodeId> {
    let v = tensor::scale(tape.value(x)?, k);
    tape.record("scale", &[x], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            Ok(vec![(x, tensor::scale(cot, k))])
        }))
    })
}

pub fn affine<T: Scalar>(tape: &mut Tape<T>, x: NodeId, k: T, c: T) -> Result<NodeId> {
    let v = tensor::affine(tape.value(x)?, k, c);
    tape.record("affine", &[x], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            Ok(vec![(x, tensor::scale(cot, k))])
        }))
    })
}

/// Clamp to [0,1]. Gradient passes through on the closed interval (boundary
/// points keep a subgradient of one, so a saturated weight can recover) and
/// is zero strictly outside it.
pub fn clamp_unit<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let v = tensor::clamp_unit(tape.value(x)?);
    tape.record("clamp_unit", &[x], v, None, |_| {
        Some(Box::new(move |ctx, cot| {
            let xs = ctx.value(x)?.as_slice();
            let g = cot.as_slice();
            let out: Vec<T> = (0..g.len())
                .map(|i| {
                    if xs[i] >= T::zero() && xs[i] <= T::one() {
                        g[i]
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Ok(vec![(x, lift(cot.shape(), out))])
        }))
    })
}

/// Broadcast product of a tensor with a single-element tensor.
pub fn mul_scalar<T: Scalar>(tape: &mut Tape<T>, x: NodeId, s: NodeId) -> Result<NodeId> {
    let sv = tape.value(s)?;
    if sv.numel() != 1 {
        return Err(shape_err!(
            "mul_scalar: scale operand has shape {:?}, expected one element",
            sv.shape()
        ));
    }
    let k = sv.as_slice()[0];
    let v = tensor::scale(tape.value(x)?, k);
    tape.record("mul_scalar", &[x, s], v, None, |_| {
        Some(Box::new(move |ctx, cot| {
            let k = ctx.value(s)?.as_slice()[0];
            let gx = tensor::scale(cot, k);
            let xs = ctx.value(x)?.as_slice();
            let g = cot.as_slice();
            let mut acc = T::zero();
            for i in 0..g.len() {
                acc = acc + g[i] * xs[i];
            }
            let sshape = ctx.value(s)?.shape().to_vec();
            Ok(vec![(x, gx), (s, lift(&sshape, vec![acc]))])
        }))
    })
}

// ── Reductions ──────────────────────────────────────────────────────────

pub fn sum_all<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let xv = tape.value(x)?;
    let shape = xv.shape().to_vec();
    let v = Tensor::scalar(tensor::sum_all(xv));
    tape.record("sum_all", &[x], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            let g = cot.as_slice()[0];
            Ok(vec![(x, Tensor::full(&shape, g))])
        }))
    })
}

pub fn mean_all<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let xv = tape.value(x)?;
    let shape = xv.shape().to_vec();
    let n = T::from_f64(xv.numel() as f64);
    let v = Tensor::scalar(tensor::mean_all(xv));
    tape.record("mean_all", &[x], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            let g = cot.as_slice()[0] / n;
            Ok(vec![(x, Tensor::full(&shape, g))])
        }))
    })
}

// ── Structure ───────────────────────────────────────────────────────────

pub fn concat_ch<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let ca = tape.value(a)?.dims4()?.1;
    let cb = tape.value(b)?.dims4()?.1;
    let v = tensor::concat_ch(tape.value(a)?, tape.value(b)?)?;
    tape.record("concat_ch", &[a, b], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            let ga = tensor::slice_ch(cot, 0, ca)?;
            let gb = tensor::slice_ch(cot, ca, ca + cb)?;
            Ok(vec![(a, ga), (b, gb)])
        }))
    })
}

pub fn slice_ch<T: Scalar>(tape: &mut Tape<T>, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
    let full = tape.value(x)?.dims4()?.1;
    let v = tensor::slice_ch(tape.value(x)?, lo, hi)?;
    tape.record("slice_ch", &[x], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            Ok(vec![(x, tensor::slice_ch_adjoint(cot, lo, full)?)])
        }))
    })
}

pub fn pixel_unshuffle<T: Scalar>(tape: &mut Tape<T>, x: NodeId, r: usize) -> Result<NodeId> {
    let v = tensor::pixel_unshuffle(tape.value(x)?, r)?;
    tape.record("pixel_unshuffle", &[x], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            Ok(vec![(x, tensor::pixel_shuffle(cot, r)?)])
        }))
    })
}

pub fn pixel_shuffle<T: Scalar>(tape: &mut Tape<T>, x: NodeId, r: usize) -> Result<NodeId> {
    let v = tensor::pixel_shuffle(tape.value(x)?, r)?;
    tape.record("pixel_shuffle", &[x], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            Ok(vec![(x, tensor::pixel_unshuffle(cot, r)?)])
        }))
    })
}

// ── Network layers ──────────────────────────────────────────────────────

/// 2-D convolution whose kernel and bias are tape nodes (parameter leaves).
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    kernel: NodeId,
    bias: NodeId,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let spec = ConvSpec::new(
        tape.value(kernel)?.clone(),
        tape.value(bias)?.clone(),
        stride,
        padding,
    )?;
    let x_shape = tape.value(x)?.shape().to_vec();
    let v = tensor::conv2d(tape.value(x)?, &spec)?;
    tape.record("conv2d", &[x, kernel, bias], v, None, |_| {
        Some(Box::new(move |ctx, cot| {
            let spec = ConvSpec::new(
                ctx.value(kernel)?.clone(),
                ctx.value(bias)?.clone(),
                stride,
                padding,
            )?;
            let gx = tensor::conv2d_vjp_input(cot, &spec, &x_shape)?;
            let gk = tensor::conv2d_vjp_kernel(cot, ctx.value(x)?, &spec)?;
            let gb = tensor::conv2d_vjp_bias(cot)?;
            Ok(vec![(x, gx), (kernel, gk), (bias, gb)])
        }))
    })
}

/// Pure group-normalization evaluation shared by the taped op (bitwise).
pub fn group_norm_eval<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(shape_err!(
            "group_norm: {c} channels not divisible into {groups} groups"
        ));
    }
    let per = c / groups;
    let m = per * h * w;
    let mf = T::from_f64(m as f64);
    let eps = T::from_f64(GROUP_NORM_EPS);
    let xs = x.as_slice();
    let mut out = vec![T::zero(); xs.len()];
    for ni in 0..n {
        for gi in 0..groups {
            let base = (ni * c + gi * per) * h * w;
            let mut mean = T::zero();
            for i in 0..m {
                mean = mean + xs[base + i];
            }
            mean = mean / mf;
            let mut var = T::zero();
            for i in 0..m {
                let d = xs[base + i] - mean;
                var = var + d * d;
            }
            var = var / mf;
            let inv = (var + eps).sqrt().recip();
            for i in 0..m {
                out[base + i] = (xs[base + i] - mean) * inv;
            }
        }
    }
    Ok(lift(x.shape(), out))
}

/// Per-sample group normalization (statistics only, no learned affine).
pub fn group_norm<T: Scalar>(tape: &mut Tape<T>, x: NodeId, groups: usize) -> Result<NodeId> {
    let v = group_norm_eval(tape.value(x)?, groups)?;
    tape.record("group_norm", &[x], v, None, |id| {
        Some(Box::new(move |ctx, cot| {
            let xv = ctx.value(x)?;
            let yv = ctx.value(id)?;
            let (n, c, h, w) = xv.dims4()?;
            let per = c / groups;
            let m = per * h * w;
            let mf = T::from_f64(m as f64);
            let eps = T::from_f64(GROUP_NORM_EPS);
            let xs = xv.as_slice();
            let ys = yv.as_slice();
            let g = cot.as_slice();
            let mut out = vec![T::zero(); xs.len()];
            for ni in 0..n {
                for gi in 0..groups {
                    let base = (ni * c + gi * per) * h * w;
                    let mut mean = T::zero();
                    for i in 0..m {
                        mean = mean + xs[base + i];
                    }
                    mean = mean / mf;
                    let mut var = T::zero();
                    for i in 0..m {
                        let d = xs[base + i] - mean;
                        var = var + d * d;
                    }
                    var = var / mf;
                    let inv = (var + eps).sqrt().recip();
                    let mut g_mean = T::zero();
                    let mut gy_mean = T::zero();
                    for i in 0..m {
                        g_mean = g_mean + g[base + i];
                        gy_mean = gy_mean + g[base + i] * ys[base + i];
                    }
                    g_mean = g_mean / mf;
                    gy_mean = gy_mean / mf;
                    for i in 0..m {
                        out[base + i] =
                            inv * (g[base + i] - g_mean - ys[base + i] * gy_mean);
                    }
                }
            }
            let shape = xv.shape().to_vec();
            Ok(vec![(x, lift(&shape, out))])
        }))
    })
}

// ── Fused image filters ─────────────────────────────────────────────────

/// Separable mirror-padded Gaussian blur as one node (its adjoint is exact,
/// so nothing between the two 1-D passes needs to be retained).
pub fn gaussian_blur<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    window: usize,
    sigma: f64,
) -> Result<NodeId> {
    let v = tensor::gaussian_filter(tape.value(x)?, window, sigma)?;
    tape.record("gaussian_blur", &[x], v, None, |_| {
        Some(Box::new(move |_ctx, cot| {
            Ok(vec![(x, tensor::gaussian_filter_adjoint(cot, window, sigma)?)])
        }))
    })
}

/// Smoothed Sobel gradient magnitude as one node; the VJP recomputes the
/// two directional responses from the retained input.
pub fn sobel_mag<T: Scalar>(tape: &mut Tape<T>, x: NodeId) -> Result<NodeId> {
    let v = tensor::sobel_magnitude(tape.value(x)?)?;
    tape.record("sobel_mag", &[x], v, None, |id| {
        Some(Box::new(move |ctx, cot| {
            let (sx, sy) = tensor::sobel_pair(ctx.value(x)?)?;
            let mag = ctx.value(id)?;
            let ux = tensor::mul(cot, &tensor::div(&sx, mag)?)?;
            let uy = tensor::mul(cot, &tensor::div(&sy, mag)?)?;
            Ok(vec![(x, tensor::sobel_pair_adjoint(&ux, &uy)?)])
        }))
    })
}
