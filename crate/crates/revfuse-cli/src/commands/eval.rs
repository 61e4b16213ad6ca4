//! `eval`: score fused images against their source pairs. Prints the
//! metric table (columns EI, AG, SF, Qabf, VIFF, then the distortion
//! scores) and writes the same numbers to `<out>/metrics.json`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use revfuse_core::metrics::{evaluate_image, ImageMetrics, MetricsReport};
use revfuse_core::synth::ImagePair;

use super::try_par_map;
use crate::dataset;
use crate::error::{io_err, CliError, CliResult};

pub struct EvalOpts {
    pub data: PathBuf,
    pub fused: PathBuf,
    pub out: PathBuf,
    /// Score the gradient-based metrics on [0,1] instead of the
    /// literature's 0–255 convention.
    pub unit_range: bool,
}

fn metrics_json(m: &ImageMetrics) -> serde_json::Value {
    serde_json::json!({
        "name": m.name,
        "ei": m.ei,
        "ag": m.ag,
        "sf": m.sf,
        "qabf": m.qabf,
        "viff": m.viff,
        "psnr": m.psnr,
        "ssim": m.ssim,
        "viff_scales": m.viff_scales,
        "degenerate": m.degenerate,
    })
}

pub fn run(opts: EvalOpts) -> CliResult<()> {
    // metrics are defined in double precision regardless of training precision
    let pairs = dataset::load_pairs::<f64>(&opts.data)?;
    let by_name: BTreeMap<&str, &ImagePair<f64>> =
        pairs.iter().map(|p| (p.name.as_str(), p)).collect();

    let mut fused_files: Vec<PathBuf> = std::fs::read_dir(&opts.fused)
        .map_err(|e| io_err(&opts.fused, "read directory", e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pgm"))
        .collect();
    fused_files.sort();
    if fused_files.is_empty() {
        return Err(CliError::data(format!(
            "no fused images (*.pgm) under {}",
            opts.fused.display()
        )));
    }

    let byte_range = !opts.unit_range;
    let rows: Vec<ImageMetrics> = try_par_map(&fused_files, |path| {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::data(format!("{}: unreadable file name", path.display())))?;
        let pair = by_name.get(stem).ok_or_else(|| {
            CliError::data(format!(
                "fused image {} has no matching source pair under {}",
                path.display(),
                opts.data.display()
            ))
        })?;
        let fused = dataset::read_pgm::<f64>(path)?;
        evaluate_image(stem, &pair.vis, &pair.ir, &fused, byte_range)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    })?;

    let mut report = MetricsReport::new(byte_range);
    for row in rows {
        report.push(row);
    }

    let means = report.means().expect("nonempty report has means");
    let doc = serde_json::json!({
        "byte_range": byte_range,
        "images": report.images.iter().map(metrics_json).collect::<Vec<_>>(),
        "means": {
            "ei": means.ei,
            "ag": means.ag,
            "sf": means.sf,
            "qabf": means.qabf,
            "viff": means.viff,
            "psnr": means.psnr,
            "ssim": means.ssim,
        },
    });
    std::fs::create_dir_all(&opts.out).map_err(|e| io_err(&opts.out, "create", e))?;
    let json_path = opts.out.join("metrics.json");
    std::fs::write(&json_path, format!("{:#}\n", doc))
        .map_err(|e| io_err(&json_path, "write", e))?;

    print!("{}", report.render_table());
    eprintln!("wrote {}", json_path.display());
    Ok(())
}
