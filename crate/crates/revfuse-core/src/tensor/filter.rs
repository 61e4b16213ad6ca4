//! Mirror-padded fixed filters: separable Gaussian smoothing and the 3×3
//! Sobel pair, together with their exact adjoints.
//!
//! Boundary handling is reflection without edge duplication (`abcd` padded by
//! two on the left reads `cbabcd`), the convention metric and loss oracles
//! are written against. Learned convolutions use zero padding instead and
//! live in `conv.rs`.

use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;
// Resolves f64 math in no_std builds; shadowed by std's inherent methods
// whenever the build graph links std (e.g. under dev-dependencies).
#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

/// Sobel magnitude smoothing constant: `√(sx² + sy² + ε²)` keeps the loss
/// differentiable where both responses vanish.
pub const SOBEL_EPS: f64 = 1e-12;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Reflected index into `[0, len)` without repeating the edge sample.
#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let mut m = i;
    let n = len as isize;
    debug_assert!(n >= 1);
    loop {
        if m < 0 {
            m = -m;
        } else if m >= n {
            m = 2 * n - 2 - m;
        } else {
            return m as usize;
        }
    }
}

/// Mirror-pads the two spatial axes of an NCHW tensor by `p` pixels.
///
/// Requires `p ≤ extent − 1` on each axis (single reflection).
pub fn mirror_pad<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if p == 0 {
        return Ok(x.clone());
    }
    if p > h - 1 || p > w - 1 {
        return Err(shape_err!(
            "mirror_pad: padding {p} too large for {h}x{w} image"
        ));
    }
    let (oh, ow) = (h + 2 * p, w + 2 * p);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let sy = reflect(oy as isize - p as isize, h);
                for ox in 0..ow {
                    let sx = reflect(ox as isize - p as isize, w);
                    out.push(x.at4(ni, ci, sy, sx));
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, c, oh, ow], out))
}

/// Adjoint of [`mirror_pad`]: folds padded-region cotangents back onto their
/// reflection sources.
pub fn fold_mirror<T: Scalar>(cot: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = cot.dims4()?;
    if p == 0 {
        return Ok(cot.clone());
    }
    if oh < 2 * p + 1 || ow < 2 * p + 1 {
        return Err(shape_err!(
            "fold_mirror: padded extent {oh}x{ow} inconsistent with padding {p}"
        ));
    }
    let (h, w) = (oh - 2 * p, ow - 2 * p);
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                let sy = reflect(oy as isize - p as isize, h);
                for ox in 0..ow {
                    let sx = reflect(ox as isize - p as isize, w);
                    let o = ((ni * c + ci) * h + sy) * w + sx;
                    out[o] = out[o] + cot.at4(ni, ci, oy, ox);
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, c, h, w], out))
}

/// Normalized 1-D Gaussian taps for an odd window.
pub fn gaussian_taps(window: usize, sigma: f64) -> Result<Vec<f64>> {
    if window % 2 == 0 || window == 0 {
        return Err(domain_err!("gaussian window must be odd, got {window}"));
    }
    if sigma <= 0.0 {
        return Err(domain_err!("gaussian sigma must be positive, got {sigma}"));
    }
    let c = (window / 2) as f64;
    let mut taps: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(taps)
}

fn check_window<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    let (_, _, h, w) = dims;
    let min = h.min(w);
    if window > 2 * min {
        return Err(shape_err!(
            "filter window {window} larger than 2·min(H,W) = {}",
            2 * min
        ));
    }
    Ok(dims)
}

/// Separable mirror-padded Gaussian blur (width pass, then height pass).
pub fn gaussian_filter<T: Scalar>(x: &Tensor<T>, window: usize, sigma: f64) -> Result<Tensor<T>> {
    check_window(x, window)?;
    if window == 1 {
        return Ok(x.clone());
    }
    let taps: Vec<T> = gaussian_taps(window, sigma)?
        .into_iter()
        .map(T::from_f64)
        .collect();
    let pass_w = pass_width(x, &taps)?;
    pass_height(&pass_w, &taps)
}

/// Adjoint of [`gaussian_filter`]: the same two passes applied in reverse
/// order with each 1-D pass replaced by its exact adjoint.
pub fn gaussian_filter_adjoint<T: Scalar>(
    cot: &Tensor<T>,
    window: usize,
    sigma: f64,
) -> Result<Tensor<T>> {
    check_window(cot, window)?;
    if window == 1 {
        return Ok(cot.clone());
    }
    let taps: Vec<T> = gaussian_taps(window, sigma)?
        .into_iter()
        .map(T::from_f64)
        .collect();
    let back_h = pass_height_adjoint(cot, &taps)?;
    pass_width_adjoint(&back_h, &taps)
}

fn pass_width<T: Scalar>(x: &Tensor<T>, taps: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let p = taps.len() / 2;
    let mut out = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for ox in 0..w {
                    let mut acc = T::zero();
                    for (k, t) in taps.iter().enumerate() {
                        let sx = reflect(ox as isize + k as isize - p as isize, w);
                        acc = acc + *t * x.at4(ni, ci, y, sx);
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, c, h, w], out))
}

fn pass_height<T: Scalar>(x: &Tensor<T>, taps: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let p = taps.len() / 2;
    let mut out = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h {
                for x2 in 0..w {
                    let mut acc = T::zero();
                    for (k, t) in taps.iter().enumerate() {
                        let sy = reflect(oy as isize + k as isize - p as isize, h);
                        acc = acc + *t * x.at4(ni, ci, sy, x2);
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, c, h, w], out))
}

fn pass_width_adjoint<T: Scalar>(u: &Tensor<T>, taps: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = u.dims4()?;
    let p = taps.len() / 2;
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for ox in 0..w {
                    let gv = u.at4(ni, ci, y, ox);
                    for (k, t) in taps.iter().enumerate() {
                        let sx = reflect(ox as isize + k as isize - p as isize, w);
                        let o = ((ni * c + ci) * h + y) * w + sx;
                        out[o] = out[o] + *t * gv;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, c, h, w], out))
}

fn pass_height_adjoint<T: Scalar>(u: &Tensor<T>, taps: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = u.dims4()?;
    let p = taps.len() / 2;
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h {
                for x2 in 0..w {
                    let gv = u.at4(ni, ci, oy, x2);
                    for (k, t) in taps.iter().enumerate() {
                        let sy = reflect(oy as isize + k as isize - p as isize, h);
                        let o = ((ni * c + ci) * h + sy) * w + x2;
                        out[o] = out[o] + *t * gv;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, c, h, w], out))
}

/// Scatter adjoint of a 3×3 mirror-padded correlation.
fn conv3x3_mirror_adjoint<T: Scalar>(u: &Tensor<T>, kernel: &[f64; 9]) -> Result<Tensor<T>> {
    let (n, c, h, w) = u.dims4()?;
    let k: Vec<T> = kernel.iter().map(|&v| T::from_f64(v)).collect();
    let mut out = vec![T::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h {
                for ox in 0..w {
                    let gv = u.at4(ni, ci, oy, ox);
                    for ky in 0..3usize {
                        let sy = reflect(oy as isize + ky as isize - 1, h);
                        for kx in 0..3usize {
                            let sx = reflect(ox as isize + kx as isize - 1, w);
                            let o = ((ni * c + ci) * h + sy) * w + sx;
                            out[o] = out[o] + k[ky * 3 + kx] * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, c, h, w], out))
}

/// Horizontal and vertical Sobel responses (mirror padding).
///
/// `sx` responds to left→right intensity increase, `sy` to top→bottom.
/// Each response is computed as a difference of two identically grouped sums
/// (`right − left`, `bottom − top`), so on a constant image the operands are
/// bitwise equal and the responses cancel to exactly zero — the property the
/// constant-image metric identities rely on.
pub fn sobel_pair<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(shape_err!("3x3 filter needs at least 2x2 image, got {h}x{w}"));
    }
    let two = T::from_f64(2.0);
    let mut outx = Vec::with_capacity(n * c * h * w);
    let mut outy = Vec::with_capacity(n * c * h * w);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h {
                let ym = reflect(oy as isize - 1, h);
                let yp = reflect(oy as isize + 1, h);
                for ox in 0..w {
                    let xm = reflect(ox as isize - 1, w);
                    let xp = reflect(ox as isize + 1, w);
                    let a = x.at4(ni, ci, ym, xm);
                    let b = x.at4(ni, ci, ym, ox);
                    let cc = x.at4(ni, ci, ym, xp);
                    let d = x.at4(ni, ci, oy, xm);
                    let f = x.at4(ni, ci, oy, xp);
                    let g = x.at4(ni, ci, yp, xm);
                    let hh = x.at4(ni, ci, yp, ox);
                    let i = x.at4(ni, ci, yp, xp);
                    outx.push((cc + two * f + i) - (a + two * d + g));
                    outy.push((g + two * hh + i) - (a + two * b + cc));
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(&[n, c, h, w], outx),
        Tensor::from_parts(&[n, c, h, w], outy),
    ))
}

/// Adjoint of [`sobel_pair`].
pub fn sobel_pair_adjoint<T: Scalar>(ux: &Tensor<T>, uy: &Tensor<T>) -> Result<Tensor<T>> {
    let gx = conv3x3_mirror_adjoint(ux, &SOBEL_X)?;
    let gy = conv3x3_mirror_adjoint(uy, &SOBEL_Y)?;
    super::add(&gx, &gy)
}

/// Smoothed Sobel gradient magnitude `√(sx² + sy² + ε²)` (differentiable).
pub fn sobel_magnitude<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (sx, sy) = sobel_pair(x)?;
    let eps2 = T::from_f64(SOBEL_EPS * SOBEL_EPS);
    sx.zip(&sy, "sobel_magnitude", |a, b| (a * a + b * b + eps2).sqrt())
}

/// Plain Sobel gradient magnitude `√(sx² + sy²)` (metrics definition; exactly
/// zero on constant images).
pub fn sobel_magnitude_plain<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (sx, sy) = sobel_pair(x)?;
    sx.zip(&sy, "sobel_magnitude_plain", |a, b| (a * a + b * b).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::mean_all;

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(p, q)| p * q)
            .sum()
    }

    #[test]
    fn reflect_skips_the_edge_sample() {
        // Row abcd padded by 2: c b | a b c d | c b
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(0, 4), 0);
        assert_eq!(reflect(3, 4), 3);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(5, 4), 1);
    }

    #[test]
    fn mirror_pad_matches_hand_layout() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = mirror_pad(&x, 1).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let want = vec![
            4.0, 3.0, 4.0, 3.0,
            2.0, 1.0, 2.0, 1.0,
            4.0, 3.0, 4.0, 3.0,
            2.0, 1.0, 2.0, 1.0,
        ];
        assert_eq!(p.as_slice(), &want[..]);
    }

    #[test]
    fn fold_is_the_exact_adjoint_of_pad() {
        let mut rng = SplitMix64::new(21);
        let x = Tensor::from_fn(&[1, 2, 5, 6], |_| rng.next_normal());
        let y = mirror_pad(&x, 2).unwrap();
        let u = Tensor::from_fn(y.shape(), |_| rng.next_normal());
        let back = fold_mirror(&u, 2).unwrap();
        assert!((dot(&y, &u) - dot(&x, &back)).abs() < 1e-10);
    }

    #[test]
    fn gaussian_taps_window3_match_hand_computation() {
        let taps = gaussian_taps(3, 1.5).unwrap();
        let side = (-1.0f64 / (2.0 * 2.25)).exp();
        let denom = 1.0 + 2.0 * side;
        assert!((taps[0] - side / denom).abs() < 1e-15);
        assert!((taps[1] - 1.0 / denom).abs() < 1e-15);
        assert!((taps[2] - side / denom).abs() < 1e-15);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn impulse_through_window3_reproduces_the_taps() {
        let mut img = vec![0.0f64; 25];
        img[12] = 1.0; // center of a 5x5
        let x = Tensor::new(&[1, 1, 5, 5], img).unwrap();
        let y = gaussian_filter(&x, 3, 1.5).unwrap();
        let taps = gaussian_taps(3, 1.5).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                let got = y.at4(0, 0, 1 + dy, 1 + dx);
                let want = taps[dy] * taps[dx];
                assert!((got - want).abs() < 1e-14, "taps at ({dy},{dx})");
            }
        }
    }

    #[test]
    fn constant_image_is_fixed_point_and_mean_is_preserved() {
        let c = Tensor::full(&[1, 1, 8, 8], 0.37f64);
        let y = gaussian_filter(&c, 11, 1.5).unwrap();
        assert!(y.max_abs_diff(&c).unwrap() < 1e-12);

        // Mirror padding only moves mass where reflections land, i.e. within
        // `window/2` of the border. With that band held constant the total
        // intensity is conserved.
        let mut rng = SplitMix64::new(2);
        let x = Tensor::from_fn(&[1, 1, 12, 12], |i| {
            let (y, x) = (i / 12, i % 12);
            if (3..9).contains(&y) && (3..9).contains(&x) {
                rng.next_f64()
            } else {
                0.4
            }
        });
        let g = gaussian_filter(&x, 5, 1.5).unwrap();
        let drift = (mean_all(&g) - mean_all(&x)).abs() / mean_all(&x).abs();
        assert!(drift < 1e-6, "mean drift {drift}");
    }

    #[test]
    fn window1_is_identity_and_oversize_window_errors() {
        let x = Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!(gaussian_filter(&x, 1, 1.5).unwrap().bit_eq(&x));
        assert!(gaussian_filter(&x, 5, 1.5).is_err());
        assert!(gaussian_filter(&x, 4, 1.5).is_err());
    }

    #[test]
    fn gaussian_adjoint_identity() {
        let mut rng = SplitMix64::new(33);
        let x = Tensor::from_fn(&[2, 1, 7, 9], |_| rng.next_normal());
        let y = gaussian_filter(&x, 5, 1.5).unwrap();
        let u = Tensor::from_fn(y.shape(), |_| rng.next_normal());
        let back = gaussian_filter_adjoint(&u, 5, 1.5).unwrap();
        assert!((dot(&y, &u) - dot(&x, &back)).abs() < 1e-10);
    }

    #[test]
    fn sobel_is_zero_on_constants_and_detects_steps() {
        let c = Tensor::full(&[1, 1, 4, 4], 0.8f64);
        let m = sobel_magnitude_plain(&c).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.0), "constant image");

        // Vertical step 0|1: the x response at the seam is ±4 under mirror pad.
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| if i % 4 < 2 { 0.0 } else { 1.0 });
        let (sx, sy) = sobel_pair(&x).unwrap();
        assert_eq!(sx.at4(0, 0, 1, 1), 4.0);
        assert_eq!(sx.at4(0, 0, 1, 2), 4.0);
        assert_eq!(sx.at4(0, 0, 1, 0), 0.0);
        assert!(sy.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_adjoint_identity() {
        let mut rng = SplitMix64::new(4);
        let x = Tensor::from_fn(&[1, 2, 6, 5], |_| rng.next_normal());
        let (sx, sy) = sobel_pair(&x).unwrap();
        let ux = Tensor::from_fn(sx.shape(), |_| rng.next_normal());
        let uy = Tensor::from_fn(sy.shape(), |_| rng.next_normal());
        let back = sobel_pair_adjoint(&ux, &uy).unwrap();
        let lhs = dot(&sx, &ux) + dot(&sy, &uy);
        assert!((lhs - dot(&x, &back)).abs() < 1e-10);
    }
}
