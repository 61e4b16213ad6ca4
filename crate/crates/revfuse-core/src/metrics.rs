//! Fusion-quality metrics: pure scalar measurements of a fused image
//! against its two sources.
//!
//! Every metric is a deterministic function of `f64` image tensors — no
//! state, no randomness, fixed accumulation order — so repeated evaluation
//! is bitwise stable. The five fusion measures (edge intensity, average
//! gradient, spatial frequency, edge preservation, visual-information
//! fidelity) follow the dominant literature definitions with all constants
//! pinned below; distortion measures (peak signal-to-noise ratio and the
//! structural-similarity index) complete the report.

use crate::error::Result;
use crate::objective::ssim_index;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;
use core::f64::consts::FRAC_PI_2;
// Resolves f64 math in no_std builds; shadowed by std's inherent methods
// whenever the build graph links std (e.g. under dev-dependencies).
#[allow(unused_imports)]
use num_traits::Float;

/// Edge-preservation sigmoid constants (strength branch).
pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
/// Edge-preservation sigmoid constants (orientation branch).
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

/// Visual-noise variance of the fidelity model.
pub const VIF_NOISE_VARIANCE: f64 = 2.0;
/// Local variances at or below this are treated as exactly degenerate.
pub const VIF_STABILIZER: f64 = 1e-10;
/// Window sizes of the four pyramid scales (σ = window/5 at each).
pub const VIF_WINDOWS: [usize; 4] = [17, 9, 5, 3];

/// Sentinel (and cap) for a vanishing mean-squared error, in dB.
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_image(x: &Tensor<f64>) -> Result<(usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 || c != 1 {
        return Err(shape_err!(
            "metrics expect one grayscale image [1,1,H,W], got {:?}",
            x.shape()
        ));
    }
    Ok((h, w))
}

fn check_same(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "metric inputs must share a shape, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Lifts any-precision image data into the `f64` domain metrics operate in.
pub fn to_f64<T: Scalar>(x: &Tensor<T>) -> Tensor<f64> {
    let src = x.as_slice();
    Tensor::from_fn(x.shape(), |k| src[k].as_f64())
}

// ── Single-image sharpness measures ─────────────────────────────────────

/// Edge intensity: the mean Sobel gradient magnitude `√(Sx² + Sy²)` over
/// all pixels (mirror padding). Exactly zero on constant images.
pub fn metric_ei(f: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_image(f)?;
    if h < 3 || w < 3 {
        return Err(shape_err!("edge intensity needs at least 3x3, got {h}x{w}"));
    }
    let mag = tensor::sobel_magnitude_plain(f)?;
    Ok(tensor::mean_all(&mag))
}

/// Average gradient: mean over interior pixels of `√((dx² + dy²)/2)` with
/// forward differences.
pub fn metric_ag(f: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_image(f)?;
    if h < 2 || w < 2 {
        return Err(shape_err!("average gradient needs at least 2x2, got {h}x{w}"));
    }
    let s = f.as_slice();
    let mut acc = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let k = r * w + c;
            let dx = s[k + 1] - s[k];
            let dy = s[k + w] - s[k];
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(acc / ((h - 1) as f64 * (w - 1) as f64))
}

/// Spatial frequency: `√(RF² + CF²)` where RF² is the mean squared
/// horizontal first difference and CF² its vertical counterpart.
pub fn metric_sf(f: &Tensor<f64>) -> Result<f64> {
    let (h, w) = check_image(f)?;
    if h < 2 || w < 2 {
        return Err(shape_err!("spatial frequency needs at least 2x2, got {h}x{w}"));
    }
    let s = f.as_slice();
    let mut rf = 0.0;
    for r in 0..h {
        for c in 1..w {
            let d = s[r * w + c] - s[r * w + c - 1];
            rf += d * d;
        }
    }
    let mut cf = 0.0;
    for r in 1..h {
        for c in 0..w {
            let d = s[r * w + c] - s[(r - 1) * w + c];
            cf += d * d;
        }
    }
    let rf2 = rf / (h as f64 * (w - 1) as f64);
    let cf2 = cf / ((h - 1) as f64 * w as f64);
    Ok((rf2 + cf2).sqrt())
}

// ── Edge preservation (two sources vs. fused) ───────────────────────────

/// A metric value plus a degeneracy warning: `degenerate` means a vanishing
/// normalizer forced the defined fallback value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QabfScore {
    pub value: f64,
    pub degenerate: bool,
}

fn strength_orientation(sx: f64, sy: f64) -> (f64, f64) {
    let g = (sx * sx + sy * sy).sqrt();
    // A vertical edge response (Sx = 0) maps to the ±π/2 pole; the branch
    // also keeps 0/0 from producing a NaN where the strength is zero anyway.
    let alpha = if sx == 0.0 {
        FRAC_PI_2
    } else {
        (sy / sx).atan()
    };
    (g, alpha)
}

/// How faithfully the fused edge `(gf, af)` preserves the source edge
/// `(gs, as_)`: the product of two sigmoids of the relative strength and
/// the orientation agreement.
fn edge_preservation(gs: f64, as_: f64, gf: f64, af: f64) -> f64 {
    let strength = if gs == gf {
        if gs == 0.0 {
            0.0
        } else {
            1.0
        }
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let orientation = 1.0 - (as_ - af).abs() / FRAC_PI_2;
    let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (strength - QABF_SIGMA_G)).exp());
    let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (orientation - QABF_SIGMA_A)).exp());
    qg * qa
}

/// Edge-preservation quality of `f` with respect to sources `a` and `b`:
/// per-pixel preservation factors weighted by source edge strength,
/// normalized by the total strength. Both sources constant (no edges to
/// preserve) yields 0 with the degeneracy flag set.
pub fn metric_qabf(a: &Tensor<f64>, b: &Tensor<f64>, f: &Tensor<f64>) -> Result<QabfScore> {
    let (h, w) = check_image(a)?;
    check_same(a, b)?;
    check_same(a, f)?;
    if h < 3 || w < 3 {
        return Err(shape_err!("edge preservation needs at least 3x3, got {h}x{w}"));
    }
    let (sax, say) = tensor::sobel_pair(a)?;
    let (sbx, sby) = tensor::sobel_pair(b)?;
    let (sfx, sfy) = tensor::sobel_pair(f)?;
    let (sax, say) = (sax.as_slice(), say.as_slice());
    let (sbx, sby) = (sbx.as_slice(), sby.as_slice());
    let (sfx, sfy) = (sfx.as_slice(), sfy.as_slice());

    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..h * w {
        let (ga, aa) = strength_orientation(sax[k], say[k]);
        let (gb, ab) = strength_orientation(sbx[k], sby[k]);
        let (gf, af) = strength_orientation(sfx[k], sfy[k]);
        let qaf = edge_preservation(ga, aa, gf, af);
        let qbf = edge_preservation(gb, ab, gf, af);
        num += qaf * ga + qbf * gb;
        den += ga + gb;
    }
    if den == 0.0 {
        return Ok(QabfScore {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(QabfScore {
        value: num / den,
        degenerate: false,
    })
}

/// The plateau value `metric_qabf(x, x, x)` reaches on any image with
/// nonzero gradients: both sigmoids evaluated at perfect agreement.
pub fn qabf_identity_plateau() -> f64 {
    edge_preservation(1.0, 0.3, 1.0, 0.3)
}

// ── Visual-information fidelity ─────────────────────────────────────────

/// A fidelity value, the pyramid depth that produced it, and a degeneracy
/// warning (some sub-band carried no source information).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViffScore {
    pub value: f64,
    /// Pyramid scales used (4 when min(H, W) ≥ 32, fewer on small inputs).
    pub scales: usize,
    pub degenerate: bool,
}

/// How many pyramid scales fit an H×W image: scale k needs the k-times
/// halved image to still cover its window.
pub fn viff_scale_count(h: usize, w: usize) -> usize {
    let (mut hh, mut ww) = (h, w);
    let mut count = 0;
    for (k, &win) in VIF_WINDOWS.iter().enumerate() {
        if k > 0 {
            hh /= 2;
            ww /= 2;
        }
        if hh.min(ww) < win {
            break;
        }
        count += 1;
    }
    count
}

fn downsample2(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    if h2 == 0 || w2 == 0 {
        return Err(shape_err!("cannot halve a {h}x{w} image"));
    }
    let mut data = Vec::with_capacity(n * c * h2 * w2);
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..h2 {
                for cc in 0..w2 {
                    data.push(x.at4(ni, ci, 2 * r, 2 * cc));
                }
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], data)
}

/// Information numerator/denominator of one source–fused pair at one scale.
///
/// Windows whose source variance vanishes contribute to neither sum; where
/// the gain is computed it divides exactly (no additive stabilizer), so a
/// fused image identical to its source yields `num == den` bitwise.
fn vif_scale_stats(src: &Tensor<f64>, fused: &Tensor<f64>, window: usize) -> Result<(f64, f64)> {
    let sigma = window as f64 / 5.0;
    let blur = |x: &Tensor<f64>| tensor::gaussian_filter(x, window, sigma);
    let mu1 = blur(src)?;
    let mu2 = blur(fused)?;
    let g11 = blur(&tensor::mul(src, src)?)?;
    let g22 = blur(&tensor::mul(fused, fused)?)?;
    let g12 = blur(&tensor::mul(src, fused)?)?;

    let (mu1, mu2) = (mu1.as_slice(), mu2.as_slice());
    let (g11, g22, g12) = (g11.as_slice(), g22.as_slice(), g12.as_slice());
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..mu1.len() {
        let s1 = (g11[k] - mu1[k] * mu1[k]).max(0.0);
        if s1 <= VIF_STABILIZER {
            continue;
        }
        let s2 = (g22[k] - mu2[k] * mu2[k]).max(0.0);
        let s12 = g12[k] - mu1[k] * mu2[k];
        let (g, sv) = if s2 <= VIF_STABILIZER {
            (0.0, 0.0)
        } else {
            let g = s12 / s1;
            if g < 0.0 {
                (0.0, s2)
            } else {
                (g, (s2 - g * s12).max(0.0))
            }
        };
        num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VARIANCE)).log10();
        den += (1.0 + s1 / VIF_NOISE_VARIANCE).log10();
    }
    Ok((num, den))
}

/// Visual-information fidelity of the fusion: per scale and per source, the
/// ratio of information surviving in `f` to information present in the
/// source; ratios averaged over the two sources and the pyramid scales.
///
/// A sub-band with no source information at all contributes the neutral
/// ratio 1 and sets the degeneracy flag. `metric_viff(x, x, x)` is exactly
/// 1 for any input.
pub fn metric_viff(a: &Tensor<f64>, b: &Tensor<f64>, f: &Tensor<f64>) -> Result<ViffScore> {
    let (h, w) = check_image(a)?;
    check_same(a, b)?;
    check_same(a, f)?;
    let scales = viff_scale_count(h, w);
    if scales == 0 {
        return Err(shape_err!(
            "fidelity pyramid needs min(H, W) >= {}, got {h}x{w}",
            VIF_WINDOWS[0]
        ));
    }
    let mut ra = a.clone();
    let mut rb = b.clone();
    let mut rf = f.clone();
    let mut degenerate = false;
    let mut sum_ratio = 0.0;
    for (k, &win) in VIF_WINDOWS[..scales].iter().enumerate() {
        if k > 0 {
            let sigma = win as f64 / 5.0;
            ra = downsample2(&tensor::gaussian_filter(&ra, win, sigma)?)?;
            rb = downsample2(&tensor::gaussian_filter(&rb, win, sigma)?)?;
            rf = downsample2(&tensor::gaussian_filter(&rf, win, sigma)?)?;
        }
        let (na, da) = vif_scale_stats(&ra, &rf, win)?;
        let (nb, db) = vif_scale_stats(&rb, &rf, win)?;
        let fa = if da == 0.0 {
            degenerate = true;
            1.0
        } else {
            na / da
        };
        let fb = if db == 0.0 {
            degenerate = true;
            1.0
        } else {
            nb / db
        };
        sum_ratio += (fa + fb) / 2.0;
    }
    Ok(ViffScore {
        value: sum_ratio / scales as f64,
        scales,
        degenerate,
    })
}

// ── Distortion measures ─────────────────────────────────────────────────

/// Peak signal-to-noise ratio in dB for unit-range images; a vanishing
/// mean-squared error reports the 99 dB sentinel, which also caps the
/// measure.
pub fn metric_psnr(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    check_image(x)?;
    check_same(x, y)?;
    let (xs, ys) = (x.as_slice(), y.as_slice());
    let mut acc = 0.0;
    for k in 0..xs.len() {
        let d = xs[k] - ys[k];
        acc += d * d;
    }
    let mse = acc / xs.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

// ── Reports ─────────────────────────────────────────────────────────────

/// Every measurement of one fused image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub ei: f64,
    pub ag: f64,
    pub sf: f64,
    pub qabf: f64,
    pub viff: f64,
    /// Against the pixel-wise maximum of the two sources, unit range.
    pub psnr: f64,
    /// Mean structural similarity against the two sources, unit range.
    pub ssim: f64,
    pub viff_scales: usize,
    pub degenerate: bool,
}

/// Arithmetic means of the per-image values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricMeans {
    pub ei: f64,
    pub ag: f64,
    pub sf: f64,
    pub qabf: f64,
    pub viff: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Measures one fused image `f` against its sources. `byte_range` rescales
/// the five fusion metrics to the 0–255 convention of the fusion
/// literature; the distortion measures always use the unit range.
pub fn evaluate_image<T: Scalar>(
    name: &str,
    v: &Tensor<T>,
    i: &Tensor<T>,
    f: &Tensor<T>,
    byte_range: bool,
) -> Result<ImageMetrics> {
    let uv = to_f64(v);
    let ui = to_f64(i);
    let uf = to_f64(f);
    let (sv, si, sf_img) = if byte_range {
        (
            tensor::scale(&uv, 255.0),
            tensor::scale(&ui, 255.0),
            tensor::scale(&uf, 255.0),
        )
    } else {
        (uv.clone(), ui.clone(), uf.clone())
    };
    let ei = metric_ei(&sf_img)?;
    let ag = metric_ag(&sf_img)?;
    let sf = metric_sf(&sf_img)?;
    let qabf = metric_qabf(&sv, &si, &sf_img)?;
    let viff = metric_viff(&sv, &si, &sf_img)?;
    let reference = tensor::maximum(&uv, &ui)?;
    let psnr = metric_psnr(&uf, &reference)?;
    let ssim = (ssim_index(&uf, &uv)? + ssim_index(&uf, &ui)?) / 2.0;
    Ok(ImageMetrics {
        name: String::from(name),
        ei,
        ag,
        sf,
        qabf: qabf.value,
        viff: viff.value,
        psnr,
        ssim,
        viff_scales: viff.scales,
        degenerate: qabf.degenerate || viff.degenerate,
    })
}

/// Per-image measurements plus dataset-level aggregates.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    /// Whether the fusion metrics used the 0–255 convention.
    pub byte_range: bool,
}

impl MetricsReport {
    pub fn new(byte_range: bool) -> Self {
        MetricsReport {
            images: Vec::new(),
            byte_range,
        }
    }

    pub fn push(&mut self, m: ImageMetrics) {
        self.images.push(m);
    }

    /// Arithmetic means across images; `None` while the report is empty.
    pub fn means(&self) -> Option<MetricMeans> {
        if self.images.is_empty() {
            return None;
        }
        let n = self.images.len() as f64;
        let sum = |pick: fn(&ImageMetrics) -> f64| self.images.iter().map(pick).sum::<f64>() / n;
        Some(MetricMeans {
            ei: sum(|m| m.ei),
            ag: sum(|m| m.ag),
            sf: sum(|m| m.sf),
            qabf: sum(|m| m.qabf),
            viff: sum(|m| m.viff),
            psnr: sum(|m| m.psnr),
            ssim: sum(|m| m.ssim),
        })
    }

    /// Aligned plain-text table: one row per image, a trailing mean row.
    pub fn render_table(&self) -> String {
        let name_w = self
            .images
            .iter()
            .map(|m| m.name.len())
            .chain([5usize])
            .max()
            .unwrap();
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "image", "EI", "AG", "SF", "Qabf", "VIFF", "PSNR", "SSIM"
        ));
        let mut row = |name: &str, e: f64, a: f64, s: f64, q: f64, vf: f64, p: f64, ss: f64| {
            out.push_str(&format!(
                "{name:<name_w$}  {e:>9.4} {a:>9.4} {s:>9.4} {q:>9.4} {vf:>9.4} {p:>9.2} {ss:>9.4}\n"
            ));
        };
        for m in &self.images {
            row(&m.name, m.ei, m.ag, m.sf, m.qabf, m.viff, m.psnr, m.ssim);
        }
        if let Some(mm) = self.means() {
            row("mean", mm.ei, mm.ag, mm.sf, mm.qabf, mm.viff, mm.psnr, mm.ssim);
        }
        out
    }
}
