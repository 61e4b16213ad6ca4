//! Dense NCHW tensors and the deterministic numeric kernels built on them.
//!
//! Conventions, fixed once for the whole pipeline:
//!
//! - layout is row-major NCHW (images are `[N, C, H, W]`);
//! - kernels never mutate their inputs (tensors are value-semantic; the
//!   backing buffer is shared on clone);
//! - no implicit broadcasting — binary ops demand equal shapes, scalars go
//!   through the explicit `scale`/`affine` entry points;
//! - every reduction and convolution accumulates in one documented loop
//!   order, so results are bitwise reproducible run to run;
//! - zero-size tensors are rejected at construction.

mod conv;
mod filter;
mod shuffle;

pub use conv::{
    conv2d, conv2d_vjp_bias, conv2d_vjp_input, conv2d_vjp_kernel, same_shape, ConvSpec,
};
pub use filter::{
    fold_mirror, gaussian_filter, gaussian_filter_adjoint, gaussian_taps, mirror_pad,
    sobel_magnitude, sobel_magnitude_plain, sobel_pair, sobel_pair_adjoint, SOBEL_EPS,
};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};

use crate::error::Result;
use crate::scalar::Scalar;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use alloc::{format, vec};

/// Dense real tensor; cloning shares the backing buffer.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that the element count matches the shape.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(shape_err!("tensor shape {shape:?} has no elements"));
        }
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: data.into(),
        })
    }

    /// Internal constructor for freshly computed buffers of known size.
    pub(crate) fn from_parts(shape: &[usize], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data: data.into(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor::from_parts(shape, vec![value; shape.iter().product()])
    }

    /// Rank-1 single-element tensor holding one scalar value.
    pub fn scalar(value: T) -> Self {
        Tensor::from_parts(&[1], vec![value])
    }

    /// Fills a tensor from a function of the flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape, (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Logical size of the element payload in bytes.
    pub fn byte_size(&self) -> usize {
        self.numel() * core::mem::size_of::<T>()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(shape_err!(
                "item() requires exactly one element, shape is {:?}",
                self.shape
            ));
        }
        Ok(self.data[0])
    }

    /// Dimensions of a rank-4 tensor as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(shape_err!("expected rank-4 NCHW tensor, got {other:?}")),
        }
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let (_, cc, hh, ww) = (
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
        );
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-by-element bit equality (used by determinism tests).
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Largest absolute elementwise difference against `other`.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        check_same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Converts elements into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            &self.shape,
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    /// Applies a unary function elementwise (internal building block).
    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip(&self, other: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        check_same_shape(op, self, other)?;
        Ok(Tensor::from_parts(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }
}

pub(crate) fn check_same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape,
            b.shape
        ));
    }
    Ok(())
}

// ── Elementwise suite ────────────────────────────────────────────────────

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip(b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip(b, "sub", |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip(b, "mul", |x, y| x * y)
}

/// Elementwise division; a zero divisor is a domain error rather than an Inf.
pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("div", a, b)?;
    if b.as_slice().iter().any(|v| v.is_zero()) {
        return Err(domain_err!("div: zero divisor element"));
    }
    a.zip(b, "div", |x, y| x / y)
}

pub fn maximum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip(b, "maximum", |x, y| if x >= y { x } else { y })
}

/// Multiplies every element by a constant.
pub fn scale<T: Scalar>(x: &Tensor<T>, k: T) -> Tensor<T> {
    x.map(|v| v * k)
}

/// `k·x + c` elementwise.
pub fn affine<T: Scalar>(x: &Tensor<T>, k: T, c: T) -> Tensor<T> {
    x.map(|v| k * v + c)
}

pub fn abs<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.abs())
}

/// Square root; negative inputs are a domain error, never a NaN.
pub fn sqrt<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.as_slice().iter().any(|v| *v < T::zero()) {
        return Err(domain_err!("sqrt: negative input element"));
    }
    Ok(x.map(|v| v.sqrt()))
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_one)
}

pub(crate) fn sigmoid_one<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// SiLU activation `x · sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid_one(v))
}

/// Reciprocal; zero elements are a domain error.
pub fn recip<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.as_slice().iter().any(|v| v.is_zero()) {
        return Err(domain_err!("recip: zero element"));
    }
    Ok(x.map(|v| T::one() / v))
}

/// Clamp into `[0, 1]` (used at image export and for the fusion weight).
pub fn clamp_unit<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v < T::zero() {
            T::zero()
        } else if v > T::one() {
            T::one()
        } else {
            v
        }
    })
}

// ── Reduce suite ─────────────────────────────────────────────────────────

/// Reduction mode for [`reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Min,
    Max,
}

/// Reduces over the given axes, keeping them as size-1 dimensions.
///
/// Accumulation order is the flat row-major order of the reduced block,
/// identical on every run.
pub fn reduce<T: Scalar>(x: &Tensor<T>, mode: Reduce, axes: &[usize]) -> Result<Tensor<T>> {
    if axes.is_empty() {
        return Err(domain_err!("reduce: empty axis list"));
    }
    let rank = x.shape().len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(domain_err!("reduce: axis {a} out of range for rank {rank}"));
        }
        reduced[a] = true;
    }
    let out_shape: Vec<usize> = x
        .shape()
        .iter()
        .enumerate()
        .map(|(i, &d)| if reduced[i] { 1 } else { d })
        .collect();

    let in_strides = strides(x.shape());
    let out_strides = strides(&out_shape);
    let init = |mode: Reduce| match mode {
        Reduce::Sum | Reduce::Mean => T::zero(),
        Reduce::Min => T::infinity(),
        Reduce::Max => T::neg_infinity(),
    };
    let mut out = vec![init(mode); out_shape.iter().product()];

    let mut idx = vec![0usize; rank];
    for flat in 0..x.numel() {
        let mut rem = flat;
        for (i, s) in in_strides.iter().enumerate() {
            idx[i] = rem / s;
            rem %= s;
        }
        let mut o = 0;
        for i in 0..rank {
            if !reduced[i] {
                o += idx[i] * out_strides[i];
            }
        }
        let v = x.as_slice()[flat];
        out[o] = match mode {
            Reduce::Sum | Reduce::Mean => out[o] + v,
            Reduce::Min => {
                if v < out[o] {
                    v
                } else {
                    out[o]
                }
            }
            Reduce::Max => {
                if v > out[o] {
                    v
                } else {
                    out[o]
                }
            }
        };
    }
    if mode == Reduce::Mean {
        let block: usize = x
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| reduced[*i])
            .map(|(_, &d)| d)
            .product();
        let inv = T::one() / T::from_f64(block as f64);
        for v in &mut out {
            *v = *v * inv;
        }
    }
    Ok(Tensor::from_parts(&out_shape, out))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Sum of every element, accumulated in flat order.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = T::zero();
    for &v in x.as_slice() {
        acc = acc + v;
    }
    acc
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> T {
    sum_all(x) / T::from_f64(x.numel() as f64)
}

pub fn min_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = x.as_slice()[0];
    for &v in x.as_slice() {
        if v < acc {
            acc = v;
        }
    }
    acc
}

pub fn max_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = x.as_slice()[0];
    for &v in x.as_slice() {
        if v > acc {
            acc = v;
        }
    }
    acc
}

// ── Channel concat / slice (rank 4) ─────────────────────────────────────

/// Concatenates two rank-4 tensors along the channel axis.
pub fn concat_ch<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!(
            "concat_ch: incompatible shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = Vec::with_capacity((ca + cb) * n * h * w);
    for ni in 0..n {
        for c in 0..ca {
            for hi in 0..h {
                for wi in 0..w {
                    out.push(a.at4(ni, c, hi, wi));
                }
            }
        }
        for c in 0..cb {
            for hi in 0..h {
                for wi in 0..w {
                    out.push(b.at4(ni, c, hi, wi));
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, ca + cb, h, w], out))
}

/// Copies channels `lo..hi` of a rank-4 tensor.
pub fn slice_ch<T: Scalar>(x: &Tensor<T>, lo: usize, hi: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if lo >= hi || hi > c {
        return Err(shape_err!("slice_ch: channel range {lo}..{hi} of {c}"));
    }
    let mut out = Vec::with_capacity((hi - lo) * n * h * w);
    for ni in 0..n {
        for ci in lo..hi {
            for hi2 in 0..h {
                for wi in 0..w {
                    out.push(x.at4(ni, ci, hi2, wi));
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, hi - lo, h, w], out))
}

/// Scatters a channel slice's cotangent back into the full channel count.
pub fn slice_ch_adjoint<T: Scalar>(
    cot: &Tensor<T>,
    lo: usize,
    full_channels: usize,
) -> Result<Tensor<T>> {
    let (n, cs, h, w) = cot.dims4()?;
    if lo + cs > full_channels {
        return Err(shape_err!(
            "slice_ch_adjoint: slice {lo}..{} exceeds {full_channels} channels",
            lo + cs
        ));
    }
    let mut out = vec![T::zero(); n * full_channels * h * w];
    for ni in 0..n {
        for ci in 0..cs {
            for hi in 0..h {
                for wi in 0..w {
                    out[((ni * full_channels + lo + ci) * h + hi) * w + wi] =
                        cot.at4(ni, ci, hi, wi);
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, full_channels, h, w], out))
}

/// Human-readable shape string for error messages.
pub fn shape_string(shape: &[usize]) -> String {
    format!("{shape:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn construction_validates_element_count() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(&[0], vec![]).is_err());
        assert!(Tensor::<f64>::new(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn elementwise_maximum_matches_definition() {
        let a = t(&[2], &[1.0, 5.0]);
        let b = t(&[2], &[3.0, 2.0]);
        assert_eq!(maximum(&a, &b).unwrap().as_slice(), &[3.0, 5.0]);
    }

    #[test]
    fn silu_is_zero_at_zero() {
        let x = t(&[3], &[0.0, 1.0, -1.0]);
        let y = silu(&x);
        assert_eq!(y.as_slice()[0], 0.0);
        assert!((y.as_slice()[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn add_then_sub_roundtrips_bitwise_on_representable_values() {
        let a = t(&[4], &[0.5, 1.25, -3.0, 10.0]);
        let b = t(&[4], &[2.0, 0.25, 1.5, -4.0]);
        let back = sub(&add(&a, &b).unwrap(), &b).unwrap();
        assert!(back.bit_eq(&a));
    }

    #[test]
    fn sqrt_rejects_negatives_with_domain_error() {
        let x = t(&[2], &[4.0, -1.0]);
        match sqrt(&x) {
            Err(Error::Domain(_)) => {}
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn div_rejects_zero_divisor() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[1.0, 0.0]);
        assert!(matches!(div(&a, &b), Err(Error::Domain(_))));
    }

    #[test]
    fn binary_ops_reject_shape_mismatch() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(add(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn reduce_suite_trivial_values() {
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sum_all(&x), 10.0);
        assert_eq!(mean_all(&t(&[3], &[2.5, 2.5, 2.5])), 2.5);
        let m = t(&[2, 2], &[0.0, 1.0, 3.0, 2.0]);
        assert_eq!(max_all(&m), 3.0);
        assert_eq!(min_all(&m), 0.0);
    }

    #[test]
    fn axis_reduce_keeps_unit_dims_and_is_exact() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = reduce(&x, Reduce::Sum, &[1]).unwrap();
        assert_eq!(rows.shape(), &[2, 1]);
        assert_eq!(rows.as_slice(), &[6.0, 15.0]);
        let mean = reduce(&x, Reduce::Mean, &[0, 1]).unwrap();
        assert_eq!(mean.as_slice(), &[3.5]);
        assert!(matches!(
            reduce(&x, Reduce::Sum, &[]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn concat_then_slice_recovers_halves_bitwise() {
        let a = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 1, 2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let cat = concat_ch(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[1, 2, 2, 2]);
        assert!(slice_ch(&cat, 0, 1).unwrap().bit_eq(&a));
        assert!(slice_ch(&cat, 1, 2).unwrap().bit_eq(&b));
    }

    #[test]
    fn clamp_unit_saturates_both_ends() {
        let x = t(&[4], &[-0.5, 0.25, 1.0, 1.5]);
        assert_eq!(clamp_unit(&x).as_slice(), &[0.0, 0.25, 1.0, 1.0]);
    }
}
