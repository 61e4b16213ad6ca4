//! Paired-image domain types, deterministic patch sampling, and synthetic
//! visible/infrared pair generators for tests and the toy training task.
//!
//! Every random choice flows through one seeded [`SplitMix64`] stream, so a
//! batch or a synthetic dataset is bitwise reproducible from its seed on any
//! platform.

use crate::error::Result;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
// Resolves f64 math in no_std builds; shadowed by std's inherent methods
// whenever the build graph links std (e.g. under dev-dependencies).
#[allow(unused_imports)]
use num_traits::Float;

/// One registered visible/infrared image pair, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImagePair<T: Scalar> {
    pub name: String,
    pub vis: Tensor<T>,
    pub ir: Tensor<T>,
}

impl<T: Scalar> ImagePair<T> {
    /// Builds a pair, enforcing matching shapes and clamping both images
    /// into the unit range.
    pub fn new(name: &str, vis: Tensor<T>, ir: Tensor<T>) -> Result<Self> {
        if vis.shape() != ir.shape() {
            return Err(shape_err!(
                "pair {name:?}: visible {:?} vs infrared {:?}",
                vis.shape(),
                ir.shape()
            ));
        }
        vis.dims4()?;
        Ok(ImagePair {
            name: String::from(name),
            vis: crate::tensor::clamp_unit(&vis),
            ir: crate::tensor::clamp_unit(&ir),
        })
    }
}

/// Where one patch of a batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPick {
    /// Index into the pair list the batch was sampled from.
    pub pair: usize,
    pub row: usize,
    pub col: usize,
}

/// A batch of aligned visible/infrared crops, `[N, 1, P, P]` each.
#[derive(Debug, Clone)]
pub struct PatchBatch<T: Scalar> {
    pub vis: Tensor<T>,
    pub ir: Tensor<T>,
    /// Source pair and offsets per patch, for exact reproduction.
    pub picks: Vec<PatchPick>,
}

/// Draws `n` aligned P×P crops from random pairs and offsets. The same
/// `(pairs, p, n, seed)` produce a bitwise-identical batch; visible and
/// infrared crops always share their offsets.
pub fn sample_patches<T: Scalar>(
    pairs: &[ImagePair<T>],
    p: usize,
    n: usize,
    seed: u64,
) -> Result<PatchBatch<T>> {
    if pairs.is_empty() {
        return Err(domain_err!("cannot sample patches from an empty pair list"));
    }
    if n == 0 {
        return Err(domain_err!("batch size must be positive"));
    }
    if p == 0 || p % 2 != 0 {
        return Err(domain_err!(
            "patch side must be a positive even number, got {p}"
        ));
    }
    for pair in pairs {
        let (_, _, h, w) = pair.vis.dims4()?;
        if p > h.min(w) {
            return Err(domain_err!(
                "patch side {p} exceeds image {:?} of pair {:?}",
                pair.vis.shape(),
                pair.name
            ));
        }
    }

    let mut rng = SplitMix64::new(seed);
    let mut picks = Vec::with_capacity(n);
    let mut vis_data = Vec::with_capacity(n * p * p);
    let mut ir_data = Vec::with_capacity(n * p * p);
    for _ in 0..n {
        let idx = rng.next_below(pairs.len() as u64) as usize;
        let pair = &pairs[idx];
        let (_, _, h, w) = pair.vis.dims4()?;
        let row = rng.next_below((h - p + 1) as u64) as usize;
        let col = rng.next_below((w - p + 1) as u64) as usize;
        picks.push(PatchPick {
            pair: idx,
            row,
            col,
        });
        for r in 0..p {
            for c in 0..p {
                vis_data.push(pair.vis.at4(0, 0, row + r, col + c));
            }
        }
        for r in 0..p {
            for c in 0..p {
                ir_data.push(pair.ir.at4(0, 0, row + r, col + c));
            }
        }
    }
    Ok(PatchBatch {
        vis: Tensor::new(&[n, 1, p, p], vis_data)?,
        ir: Tensor::new(&[n, 1, p, p], ir_data)?,
        picks,
    })
}

/// The synthetic pair families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Visible carries random blobs only in the left half, infrared only in
    /// the right — the ideal fusion is their pixel-wise maximum.
    ComplementaryHalves,
    /// A smooth brightness ramp against a high-frequency texture.
    GradientVsTexture,
    /// A vertical step edge against a horizontal one.
    StepEdges,
}

impl SynthKind {
    /// Parses the kebab-case kind names used on the command line.
    pub fn parse(s: &str) -> Option<SynthKind> {
        match s {
            "complementary-halves" => Some(SynthKind::ComplementaryHalves),
            "gradient-vs-texture" => Some(SynthKind::GradientVsTexture),
            "step-edges" => Some(SynthKind::StepEdges),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::ComplementaryHalves => "complementary-halves",
            SynthKind::GradientVsTexture => "gradient-vs-texture",
            SynthKind::StepEdges => "step-edges",
        }
    }
}

/// Sum of random Gaussian bumps with centers confined to `cols`, clamped to
/// the unit range and zeroed outside `cols` so the two halves of a
/// complementary pair have exactly disjoint support.
fn blob_field<T: Scalar>(
    size: usize,
    cols: core::ops::Range<usize>,
    rng: &mut SplitMix64,
) -> Tensor<T> {
    let blobs = 3 + rng.next_below(3);
    let mut params = Vec::new();
    for _ in 0..blobs {
        let cy = rng.next_range(0.0, size as f64);
        let cx = rng.next_range(cols.start as f64, cols.end as f64);
        let amp = rng.next_range(0.5, 1.0);
        let radius = rng.next_range(size as f64 / 16.0, size as f64 / 6.0);
        params.push((cy, cx, amp, radius));
    }
    // Ramp the field down toward any column edge that borders the other
    // half, so each source fades out smoothly instead of ending in a hard
    // cliff.  A cliff would give both sources an artificial sharpness spike
    // at the boundary that no fused image could reproduce, making spatial
    // frequency comparisons against the fusion meaningless.
    let taper = (size as f64 / 8.0).max(2.0);
    Tensor::from_fn(&[1, 1, size, size], |k| {
        let (r, c) = (k / size, k % size);
        if !cols.contains(&c) {
            return T::from_f64(0.0);
        }
        let mut ramp: f64 = 1.0;
        if cols.start > 0 {
            ramp = ramp.min((c - cols.start + 1) as f64 / taper);
        }
        if cols.end < size {
            ramp = ramp.min((cols.end - c) as f64 / taper);
        }
        let mut v = 0.0;
        for &(cy, cx, amp, radius) in &params {
            let d2 = (r as f64 - cy) * (r as f64 - cy) + (c as f64 - cx) * (c as f64 - cx);
            v += amp * (-d2 / (2.0 * radius * radius)).exp();
        }
        T::from_f64((v * ramp).min(1.0))
    })
}

/// Generates `count` deterministic synthetic pairs of `size × size` images.
pub fn synth_pairs<T: Scalar>(
    kind: SynthKind,
    size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ImagePair<T>>> {
    if size < 2 || size % 2 != 0 {
        return Err(domain_err!("pair size must be even and >= 2, got {size}"));
    }
    if count == 0 {
        return Err(domain_err!("pair count must be positive"));
    }
    let mut rng = SplitMix64::new(seed);
    let mut pairs = Vec::with_capacity(count);
    for idx in 0..count {
        let name = format!("{}-{idx:03}", kind.name());
        let (vis, ir) = match kind {
            SynthKind::ComplementaryHalves => {
                let vis = blob_field(size, 0..size / 2, &mut rng);
                let ir = blob_field(size, size / 2..size, &mut rng);
                (vis, ir)
            }
            SynthKind::GradientVsTexture => {
                let angle = rng.next_range(0.0, core::f64::consts::PI);
                let (dy, dx) = (angle.sin(), angle.cos());
                let span = (size - 1) as f64 * (dy.abs() + dx.abs());
                let offset = rng.next_range(0.0, 1.0);
                let vis = Tensor::from_fn(&[1, 1, size, size], |k| {
                    let (r, c) = (k / size, k % size);
                    let t = (dy * r as f64 + dx * c as f64) / span + offset;
                    T::from_f64(t - t.floor())
                });
                let fy = rng.next_range(0.6, 1.4);
                let fx = rng.next_range(0.6, 1.4);
                let ir = Tensor::from_fn(&[1, 1, size, size], |k| {
                    let (r, c) = (k / size, k % size);
                    T::from_f64(0.5 + 0.5 * (fy * r as f64).sin() * (fx * c as f64).sin())
                });
                (vis, ir)
            }
            SynthKind::StepEdges => {
                let split_c = 1 + rng.next_below(size as u64 - 1) as usize;
                let split_r = 1 + rng.next_below(size as u64 - 1) as usize;
                let vis = Tensor::from_fn(&[1, 1, size, size], |k| {
                    T::from_f64(if k % size < split_c { 0.2 } else { 0.8 })
                });
                let ir = Tensor::from_fn(&[1, 1, size, size], |k| {
                    T::from_f64(if k / size < split_r { 0.8 } else { 0.2 })
                });
                (vis, ir)
            }
        };
        pairs.push(ImagePair::new(&name, vis, ir)?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{metric_sf, to_f64};
    use crate::tensor;

    #[test]
    fn pairs_reject_mismatched_shapes_and_clamp_values() {
        let a = Tensor::from_fn(&[1, 1, 4, 4], |k| k as f64 * 0.2 - 0.3);
        let b = Tensor::from_fn(&[1, 1, 4, 6], |_| 0.5);
        assert!(ImagePair::new("bad", a.clone(), b).is_err());

        let pair = ImagePair::new("ok", a.clone(), a).unwrap();
        for &v in pair.vis.as_slice() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn identical_seeds_reproduce_identical_batches() {
        let pairs = synth_pairs::<f64>(SynthKind::ComplementaryHalves, 16, 3, 7).unwrap();
        let a = sample_patches(&pairs, 8, 4, 42).unwrap();
        let b = sample_patches(&pairs, 8, 4, 42).unwrap();
        assert!(a.vis.bit_eq(&b.vis) && a.ir.bit_eq(&b.ir));
        assert_eq!(a.picks, b.picks);

        let c = sample_patches(&pairs, 8, 4, 43).unwrap();
        assert!(!(a.vis.bit_eq(&c.vis) && a.picks == c.picks), "seed must matter");
    }

    #[test]
    fn crops_equal_direct_slicing_at_the_recorded_offsets() {
        let pairs = synth_pairs::<f64>(SynthKind::GradientVsTexture, 16, 2, 8).unwrap();
        let batch = sample_patches(&pairs, 6, 3, 5).unwrap();
        for (bi, pick) in batch.picks.iter().enumerate() {
            let src = &pairs[pick.pair];
            for r in 0..6 {
                for c in 0..6 {
                    assert_eq!(
                        batch.vis.at4(bi, 0, r, c).to_bits(),
                        src.vis.at4(0, 0, pick.row + r, pick.col + c).to_bits()
                    );
                    assert_eq!(
                        batch.ir.at4(bi, 0, r, c).to_bits(),
                        src.ir.at4(0, 0, pick.row + r, pick.col + c).to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn full_size_patches_pin_the_offsets_to_zero() {
        let pairs = synth_pairs::<f64>(SynthKind::StepEdges, 8, 1, 9).unwrap();
        let batch = sample_patches(&pairs, 8, 2, 1).unwrap();
        for pick in &batch.picks {
            assert_eq!((pick.row, pick.col), (0, 0));
        }
        assert!(batch.vis.bit_eq(&{
            let mut both = pairs[0].vis.as_slice().to_vec();
            both.extend_from_slice(pairs[0].vis.as_slice());
            Tensor::new(&[2, 1, 8, 8], both).unwrap()
        }));
        assert!(sample_patches(&pairs, 10, 1, 0).is_err(), "patch larger than image");
        assert!(sample_patches(&pairs, 5, 1, 0).is_err(), "odd patch side");
    }

    #[test]
    fn complementary_halves_have_disjoint_support_and_fusable_structure() {
        let pairs = synth_pairs::<f64>(SynthKind::ComplementaryHalves, 32, 4, 11).unwrap();
        for pair in &pairs {
            let product = tensor::mul(&pair.vis, &pair.ir).unwrap();
            assert_eq!(tensor::max_all(&product), 0.0, "supports must be disjoint");

            let fused = tensor::maximum(&pair.vis, &pair.ir).unwrap();
            let sf_fused = metric_sf(&to_f64(&fused)).unwrap();
            let sf_vis = metric_sf(&to_f64(&pair.vis)).unwrap();
            let sf_ir = metric_sf(&to_f64(&pair.ir)).unwrap();
            assert!(
                sf_fused > sf_vis && sf_fused > sf_ir,
                "max-fusion must add structure: {sf_fused} vs {sf_vis}/{sf_ir}"
            );
        }
    }

    #[test]
    fn generators_are_deterministic_and_in_range() {
        for kind in [
            SynthKind::ComplementaryHalves,
            SynthKind::GradientVsTexture,
            SynthKind::StepEdges,
        ] {
            let a = synth_pairs::<f32>(kind, 16, 2, 3).unwrap();
            let b = synth_pairs::<f32>(kind, 16, 2, 3).unwrap();
            for (pa, pb) in a.iter().zip(&b) {
                assert_eq!(pa.name, pb.name);
                assert!(pa.vis.bit_eq(&pb.vis) && pa.ir.bit_eq(&pb.ir));
                for &v in pa.vis.as_slice().iter().chain(pa.ir.as_slice()) {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
        assert!(synth_pairs::<f64>(SynthKind::StepEdges, 15, 1, 0).is_err());
    }

    #[test]
    fn kind_names_roundtrip_through_the_parser() {
        for kind in [
            SynthKind::ComplementaryHalves,
            SynthKind::GradientVsTexture,
            SynthKind::StepEdges,
        ] {
            assert_eq!(SynthKind::parse(kind.name()), Some(kind));
        }
        assert_eq!(SynthKind::parse("perlin"), None);
    }
}
