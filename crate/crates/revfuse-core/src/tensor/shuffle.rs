//! Space-to-depth and depth-to-space permutations.
//!
//! These lossless rearrangements stand in for learned up/down-sampling: the
//! whole image pyramid stays exactly invertible. Sub-pixel ordering is
//! row-major within each `r×r` cell: input pixel `(y·r+dy, x·r+dx)` of
//! channel `c` lands in output channel `c·r² + dy·r + dx` at `(y, x)`.

use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;
use alloc::vec;

/// Space-to-depth: `[N, C, H, W] -> [N, C·r², H/r, W/r]`.
pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 {
        return Err(domain_err!("pixel_unshuffle: r must be positive"));
    }
    let (n, c, h, w) = input.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(shape_err!(
            "pixel_unshuffle: spatial dims {h}x{w} not divisible by r={r}"
        ));
    }
    if r == 1 {
        return Ok(input.clone());
    }
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let mut out = vec![T::zero(); n * oc * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    for dy in 0..r {
                        for dx in 0..r {
                            let co = ci * r * r + dy * r + dx;
                            out[((ni * oc + co) * oh + oy) * ow + ox] =
                                input.at4(ni, ci, oy * r + dy, ox * r + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, oc, oh, ow], out))
}

/// Depth-to-space: exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 {
        return Err(domain_err!("pixel_shuffle: r must be positive"));
    }
    let (n, c, h, w) = input.dims4()?;
    if c % (r * r) != 0 {
        return Err(shape_err!(
            "pixel_shuffle: {c} channels not divisible by r²={}",
            r * r
        ));
    }
    if r == 1 {
        return Ok(input.clone());
    }
    let (oc, oh, ow) = (c / (r * r), h * r, w * r);
    let mut out = vec![T::zero(); n * oc * oh * ow];
    for ni in 0..n {
        for co in 0..oc {
            for y in 0..h {
                for x in 0..w {
                    for dy in 0..r {
                        for dx in 0..r {
                            let ci = co * r * r + dy * r + dx;
                            out[((ni * oc + co) * oh + y * r + dy) * ow + x * r + dx] =
                                input.at4(ni, ci, y, x);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(&[n, oc, oh, ow], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn r1_is_identity() {
        let x = Tensor::new(&[1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        assert!(pixel_unshuffle(&x, 1).unwrap().bit_eq(&x));
        assert!(pixel_shuffle(&x, 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn two_by_two_cell_enumerates_row_major() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        let back = pixel_shuffle(&y, 2).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn roundtrips_are_bitwise_for_random_tensors() {
        let mut rng = SplitMix64::new(9);
        for (shape, r) in [
            (&[2usize, 3, 6, 6][..], 2usize),
            (&[1, 1, 9, 9][..], 3),
            (&[1, 8, 4, 4][..], 2),
        ] {
            let x = Tensor::<f32>::from_fn(shape, |_| rng.next_normal() as f32);
            let down = pixel_unshuffle(&x, r).unwrap();
            assert!(pixel_shuffle(&down, r).unwrap().bit_eq(&x));
            // Reverse composition: shuffle first when channels allow it.
            if shape[1] % (r * r) == 0 {
                let up = pixel_shuffle(&x, r).unwrap();
                assert!(pixel_unshuffle(&up, r).unwrap().bit_eq(&x));
            }
        }
    }

    #[test]
    fn indivisible_dims_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(pixel_unshuffle(&x, 2).is_err());
        let y = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(pixel_shuffle(&y, 2).is_err());
    }
}
