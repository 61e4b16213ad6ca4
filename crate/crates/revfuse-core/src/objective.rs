//! Training objective: structural-similarity, pixel, and maximum-gradient
//! losses, summed without weights.
//!
//! Every loss exists twice with bitwise-identical values: a taped builder
//! (for training graphs) and a pure evaluator (for reporting without a
//! tape). Swapping the two source images leaves every component bitwise
//! unchanged — sums and elementwise maxima are the only cross-source
//! combinators.

use crate::autograd::{ops, NodeId, Tape};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Side length of the structural-similarity window.
pub const SSIM_WINDOW: usize = 11;
/// Gaussian σ of the structural-similarity window.
pub const SSIM_SIGMA: f64 = 1.5;
/// Luminance stabilizer (0.01·L)² at dynamic range L = 1.
pub const SSIM_C1: f64 = 1e-4;
/// Contrast stabilizer (0.03·L)² at dynamic range L = 1.
pub const SSIM_C2: f64 = 9e-4;

/// The loss components of one forward pass, in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ssim: f64,
    pub l_1: f64,
    pub l_grad: f64,
    pub total: f64,
}

/// Node handles of the taped loss graph; read values before backward.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l_ssim: NodeId,
    pub l_1: NodeId,
    pub l_grad: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    /// Snapshots all four scalars out of the tape.
    pub fn read<T: Scalar>(&self, tape: &Tape<T>) -> Result<LossBreakdown> {
        let scalar = |id: NodeId| -> Result<f64> {
            Ok(tape.value(id)?.as_slice()[0].as_f64())
        };
        Ok(LossBreakdown {
            l_ssim: scalar(self.l_ssim)?,
            l_1: scalar(self.l_1)?,
            l_grad: scalar(self.l_grad)?,
            total: scalar(self.total)?,
        })
    }
}

fn check_ssim_inputs<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "structural similarity needs equal shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    a.dims4()?;
    Ok(())
}

// ── Structural similarity ───────────────────────────────────────────────

/// Mean of the local SSIM map over an 11×11 Gaussian window (σ = 1.5),
/// mirror padding, dynamic range 1. Pure evaluation.
pub fn ssim_index<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_ssim_inputs(a, b)?;
    let blur = |x: &Tensor<T>| tensor::gaussian_filter(x, SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let g_aa = blur(&tensor::mul(a, a)?)?;
    let g_bb = blur(&tensor::mul(b, b)?)?;
    let g_ab = blur(&tensor::mul(a, b)?)?;
    let mu_aa = tensor::mul(&mu_a, &mu_a)?;
    let mu_bb = tensor::mul(&mu_b, &mu_b)?;
    let mu_ab = tensor::mul(&mu_a, &mu_b)?;
    let s_aa = tensor::sub(&g_aa, &mu_aa)?;
    let s_bb = tensor::sub(&g_bb, &mu_bb)?;
    let s_ab = tensor::sub(&g_ab, &mu_ab)?;
    let two = T::from_f64(2.0);
    let c1 = T::from_f64(SSIM_C1);
    let c2 = T::from_f64(SSIM_C2);
    let one = T::from_f64(1.0);
    let num = tensor::mul(
        &tensor::affine(&mu_ab, two, c1),
        &tensor::affine(&s_ab, two, c2),
    )?;
    let den = tensor::mul(
        &tensor::affine(&tensor::add(&mu_aa, &mu_bb)?, one, c1),
        &tensor::affine(&tensor::add(&s_aa, &s_bb)?, one, c2),
    )?;
    let map = tensor::div(&num, &den)?;
    Ok(tensor::mean_all(&map).as_f64())
}

/// Taped twin of [`ssim_index`]; returns a one-element node.
pub fn ssim_index_build<T: Scalar>(
    tape: &mut Tape<T>,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    check_ssim_inputs(tape.value(a)?, tape.value(b)?)?;
    let blur = |tape: &mut Tape<T>, x: NodeId| ops::gaussian_blur(tape, x, SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = blur(tape, a)?;
    let mu_b = blur(tape, b)?;
    let aa = ops::mul(tape, a, a)?;
    let bb = ops::mul(tape, b, b)?;
    let ab = ops::mul(tape, a, b)?;
    let g_aa = blur(tape, aa)?;
    let g_bb = blur(tape, bb)?;
    let g_ab = blur(tape, ab)?;
    let mu_aa = ops::mul(tape, mu_a, mu_a)?;
    let mu_bb = ops::mul(tape, mu_b, mu_b)?;
    let mu_ab = ops::mul(tape, mu_a, mu_b)?;
    let s_aa = ops::sub(tape, g_aa, mu_aa)?;
    let s_bb = ops::sub(tape, g_bb, mu_bb)?;
    let s_ab = ops::sub(tape, g_ab, mu_ab)?;
    let two = T::from_f64(2.0);
    let c1 = T::from_f64(SSIM_C1);
    let c2 = T::from_f64(SSIM_C2);
    let one = T::from_f64(1.0);
    let n1 = ops::affine(tape, mu_ab, two, c1)?;
    let n2 = ops::affine(tape, s_ab, two, c2)?;
    let num = ops::mul(tape, n1, n2)?;
    let d1s = ops::add(tape, mu_aa, mu_bb)?;
    let d1 = ops::affine(tape, d1s, one, c1)?;
    let d2s = ops::add(tape, s_aa, s_bb)?;
    let d2 = ops::affine(tape, d2s, one, c2)?;
    let den = ops::mul(tape, d1, d2)?;
    let map = ops::div(tape, num, den)?;
    ops::mean_all(tape, map)
}

// ── Loss components ─────────────────────────────────────────────────────

fn check_triple<T: Scalar>(i: &Tensor<T>, v: &Tensor<T>, f: &Tensor<T>) -> Result<()> {
    if i.shape() != f.shape() || v.shape() != f.shape() {
        return Err(shape_err!(
            "loss expects three equal shapes, got {:?}, {:?}, {:?}",
            i.shape(),
            v.shape(),
            f.shape()
        ));
    }
    Ok(())
}

/// `2 − SSIM(i,f) − SSIM(v,f)`, computed as `2 − (sum of the two indices)`
/// so the two sources commute bitwise.
pub fn loss_ssim<T: Scalar>(i: &Tensor<T>, v: &Tensor<T>, f: &Tensor<T>) -> Result<f64> {
    check_triple(i, v, f)?;
    Ok(2.0 - (ssim_index(i, f)? + ssim_index(v, f)?))
}

pub fn loss_ssim_build<T: Scalar>(
    tape: &mut Tape<T>,
    i: NodeId,
    v: NodeId,
    f: NodeId,
) -> Result<NodeId> {
    let s_if = ssim_index_build(tape, i, f)?;
    let s_vf = ssim_index_build(tape, v, f)?;
    let sum = ops::add(tape, s_if, s_vf)?;
    ops::affine(tape, sum, T::from_f64(-1.0), T::from_f64(2.0))
}

/// Mean absolute difference against each source, summed.
pub fn loss_l1<T: Scalar>(i: &Tensor<T>, v: &Tensor<T>, f: &Tensor<T>) -> Result<f64> {
    check_triple(i, v, f)?;
    let m_if = tensor::mean_all(&tensor::abs(&tensor::sub(i, f)?)).as_f64();
    let m_vf = tensor::mean_all(&tensor::abs(&tensor::sub(v, f)?)).as_f64();
    Ok(m_if + m_vf)
}

pub fn loss_l1_build<T: Scalar>(
    tape: &mut Tape<T>,
    i: NodeId,
    v: NodeId,
    f: NodeId,
) -> Result<NodeId> {
    let d_if = ops::sub(tape, i, f)?;
    let a_if = ops::abs(tape, d_if)?;
    let m_if = ops::mean_all(tape, a_if)?;
    let d_vf = ops::sub(tape, v, f)?;
    let a_vf = ops::abs(tape, d_vf)?;
    let m_vf = ops::mean_all(tape, a_vf)?;
    ops::add(tape, m_if, m_vf)
}

fn check_grad_size<T: Scalar>(f: &Tensor<T>) -> Result<()> {
    let (_, _, h, w) = f.dims4()?;
    if h < 3 || w < 3 {
        return Err(shape_err!(
            "gradient loss needs at least 3x3 images for the Sobel kernel, got {h}x{w}"
        ));
    }
    Ok(())
}

/// Mean absolute difference between the fused image's Sobel magnitude and
/// the elementwise maximum of the two source magnitudes.
pub fn loss_grad<T: Scalar>(i: &Tensor<T>, v: &Tensor<T>, f: &Tensor<T>) -> Result<f64> {
    check_triple(i, v, f)?;
    check_grad_size(f)?;
    let gi = tensor::sobel_magnitude(i)?;
    let gv = tensor::sobel_magnitude(v)?;
    let gf = tensor::sobel_magnitude(f)?;
    let target = tensor::maximum(&gv, &gi)?;
    Ok(tensor::mean_all(&tensor::abs(&tensor::sub(&gf, &target)?)).as_f64())
}

pub fn loss_grad_build<T: Scalar>(
    tape: &mut Tape<T>,
    i: NodeId,
    v: NodeId,
    f: NodeId,
) -> Result<NodeId> {
    check_grad_size(tape.value(f)?)?;
    let gi = ops::sobel_mag(tape, i)?;
    let gv = ops::sobel_mag(tape, v)?;
    let gf = ops::sobel_mag(tape, f)?;
    let target = ops::maximum(tape, gv, gi)?;
    let diff = ops::sub(tape, gf, target)?;
    let a = ops::abs(tape, diff)?;
    ops::mean_all(tape, a)
}

/// All three components and their unweighted sum. Pure evaluation.
pub fn loss_total<T: Scalar>(
    i: &Tensor<T>,
    v: &Tensor<T>,
    f: &Tensor<T>,
) -> Result<LossBreakdown> {
    let l_ssim = loss_ssim(i, v, f)?;
    let l_1 = loss_l1(i, v, f)?;
    let l_grad = loss_grad(i, v, f)?;
    Ok(LossBreakdown {
        l_ssim,
        l_1,
        l_grad,
        total: (l_ssim + l_1) + l_grad,
    })
}

/// Taped twin of [`loss_total`]; the `total` node is the training root.
pub fn loss_total_build<T: Scalar>(
    tape: &mut Tape<T>,
    i: NodeId,
    v: NodeId,
    f: NodeId,
) -> Result<LossNodes> {
    let l_ssim = loss_ssim_build(tape, i, v, f)?;
    let l_1 = loss_l1_build(tape, i, v, f)?;
    let l_grad = loss_grad_build(tape, i, v, f)?;
    let partial = ops::add(tape, l_ssim, l_1)?;
    let total = ops::add(tape, partial, l_grad)?;
    Ok(LossNodes {
        l_ssim,
        l_1,
        l_grad,
        total,
    })
}
