//! `fuse`: run a trained checkpoint over full-resolution image pairs and
//! write fused PGMs. No patching at inference; outputs are clamped to
//! [0,1] before quantization.

use std::path::PathBuf;

use revfuse_core::chain::{chain_forward, combine_w, FusionModel};
use revfuse_core::params::ParamStore;
use revfuse_core::revnet::InitMode;
use revfuse_core::rng::SplitMix64;
use revfuse_core::scalar::Scalar;
use revfuse_core::synth::ImagePair;
use revfuse_core::{tensor, Tensor};

use super::{try_par_map, STREAM_MODEL};
use crate::checkpoint::{self, RawCheckpoint};
use crate::config::{Precision, RunConfig};
use crate::dataset;
use crate::error::{io_err, CliError, CliResult};

/// Spatial multiple the estimator requires (two resolution halvings).
pub const DIM_MULTIPLE: usize = 4;

pub struct FuseOpts {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub pad_to_even: bool,
    pub no_ddim: bool,
}

pub fn run(opts: FuseOpts) -> CliResult<()> {
    let raw = checkpoint::load(&opts.checkpoint)?;
    let mut cfg = raw.config.clone();
    if opts.no_ddim {
        cfg.ddim = false;
    }
    match cfg.precision {
        Precision::Single => fuse_typed::<f32>(&raw, &cfg, &opts),
        Precision::Double => fuse_typed::<f64>(&raw, &cfg, &opts),
    }
}

/// Mirror index for reflective padding (…, 2, 1, 0 | 0.. n-1 | n-1, n-2, …
/// reflected about the last sample).
fn mirror(idx: usize, n: usize) -> usize {
    if idx < n {
        idx
    } else {
        (2 * n).saturating_sub(idx + 2).min(n - 1)
    }
}

/// Reflectively pads an image up to the next multiple of `m` on both
/// spatial axes. Returns the input unchanged when it already conforms.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, m: usize) -> CliResult<Tensor<T>> {
    let (n, c, h, w) = x.dims4().map_err(CliError::from)?;
    let hp = h.div_ceil(m) * m;
    let wp = w.div_ceil(m) * m;
    if hp == h && wp == w {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn(&[n, c, hp, wp], |k| {
        let col = mirror(k % wp, w);
        let rest = k / wp;
        let row = mirror(rest % hp, h);
        let nc = rest / hp;
        x.as_slice()[(nc * h + row) * w + col]
    }))
}

/// Crops the top-left `h × w` window back out of a padded result.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> CliResult<Tensor<T>> {
    let (n, c, hp, wp) = x.dims4().map_err(CliError::from)?;
    if h > hp || w > wp {
        return Err(CliError::data(format!(
            "cannot crop {h}x{w} out of {hp}x{wp}"
        )));
    }
    if h == hp && w == wp {
        return Ok(x.clone());
    }
    Ok(Tensor::from_fn(&[n, c, h, w], |k| {
        let col = k % w;
        let rest = k / w;
        let row = rest % h;
        let nc = rest / h;
        x.as_slice()[(nc * hp + row) * wp + col]
    }))
}

/// Fuses one pair at full resolution: pad if allowed and needed, walk the
/// chain, mix the endpoints, crop back, clamp.
pub fn fuse_pair<T: Scalar>(
    pair: &ImagePair<T>,
    model: &FusionModel,
    store: &ParamStore<T>,
    pad: bool,
) -> CliResult<Tensor<T>> {
    let (_, _, h, w) = pair.vis.dims4().map_err(CliError::from)?;
    let (v, i) = if h % DIM_MULTIPLE == 0 && w % DIM_MULTIPLE == 0 {
        (pair.vis.clone(), pair.ir.clone())
    } else if pad {
        (
            pad_to_multiple(&pair.vis, DIM_MULTIPLE)?,
            pad_to_multiple(&pair.ir, DIM_MULTIPLE)?,
        )
    } else {
        return Err(CliError::data(format!(
            "pair {:?} is {h}x{w}; spatial dims must be multiples of {DIM_MULTIPLE} — \
             rerun with --pad-to-even to mirror-pad the inputs and crop the output",
            pair.name
        )));
    };
    let endpoints = chain_forward(&v, &i, model, store).map_err(CliError::from)?;
    let w_raw = store.get(model.w_raw).as_slice()[0];
    let fused = combine_w(&endpoints.f_last, &endpoints.f_prev, w_raw).map_err(CliError::from)?;
    let fused = crop(&fused, h, w)?;
    Ok(tensor::clamp_unit(&fused))
}

fn fuse_typed<T: Scalar>(raw: &RawCheckpoint, cfg: &RunConfig, opts: &FuseOpts) -> CliResult<()> {
    let mut store: ParamStore<T> = ParamStore::new();
    let mut rng = SplitMix64::new(cfg.seed ^ STREAM_MODEL);
    let model = FusionModel::register(&mut store, cfg.model_options(), InitMode::Train, &mut rng)
        .map_err(CliError::from)?;
    raw.restore(&mut store)?;

    let pairs = dataset::load_pairs::<T>(&opts.data)?;
    let fused_dir = opts.out.join("fused");
    std::fs::create_dir_all(&fused_dir).map_err(|e| io_err(&fused_dir, "create", e))?;

    // fuse in parallel (deterministic order), then write sequentially
    let encoded = try_par_map(&pairs, |pair| {
        let fused = fuse_pair(pair, &model, &store, opts.pad_to_even)?;
        let enc = revfuse_core::pgm::encode(&fused, 255)
            .map_err(|e| CliError::data(format!("pair {:?}: {e}", pair.name)))?;
        Ok((pair.name.clone(), enc.bytes))
    })?;
    for (name, bytes) in &encoded {
        let path = fused_dir.join(format!("{name}.pgm"));
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, "write", e))?;
    }
    eprintln!(
        "fused {} pairs into {}",
        encoded.len(),
        fused_dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_padding_reflects_edges() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |k| k as f64);
        let p = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        // row 3 mirrors row 1, column 3 mirrors column 1
        for c in 0..3 {
            assert_eq!(p.at4(0, 0, 3, c), x.at4(0, 0, 1, c));
        }
        for r in 0..3 {
            assert_eq!(p.at4(0, 0, r, 3), x.at4(0, 0, r, 1));
        }
        assert_eq!(p.at4(0, 0, 3, 3), x.at4(0, 0, 1, 1));
        // conforming input passes through untouched
        let ok = Tensor::<f64>::zeros(&[1, 1, 4, 8]);
        assert_eq!(pad_to_multiple(&ok, 4).unwrap().shape(), ok.shape());
    }

    #[test]
    fn crop_inverts_padding() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 5, 6], |k| (k as f64).sin());
        let padded = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(padded.shape(), &[1, 1, 8, 8]);
        let back = crop(&padded, 5, 6).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert_eq!(back.max_abs_diff(&x).unwrap(), 0.0);
        assert!(crop(&x, 6, 6).is_err());
    }

    #[test]
    fn mirror_clamps_tiny_axes() {
        // a 1-pixel axis can only replicate
        assert_eq!(mirror(0, 1), 0);
        assert_eq!(mirror(1, 1), 0);
        assert_eq!(mirror(2, 1), 0);
        assert_eq!(mirror(3, 3), 1);
        assert_eq!(mirror(4, 3), 0);
    }
}
