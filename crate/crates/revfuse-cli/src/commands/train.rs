//! `train`: optimize a fusion model and write a checkpoint plus a
//! JSON-lines log (one object per optimization step).

use std::io::Write as _;
use std::path::Path;

use revfuse_core::chain::{train_step, FusionModel};
use revfuse_core::optim::Adam;
use revfuse_core::params::ParamStore;
use revfuse_core::revnet::InitMode;
use revfuse_core::rng::SplitMix64;
use revfuse_core::scalar::Scalar;
use revfuse_core::synth::{sample_patches, synth_pairs, ImagePair};
use revfuse_core::Error as CoreError;

use super::{STREAM_BATCH, STREAM_MODEL, STREAM_SYNTH};
use crate::checkpoint;
use crate::config::{Precision, RunConfig};
use crate::error::{io_err, CliError, CliResult};

/// Loads the dataset a config asks for: generated when `synth` is set,
/// read from `data` otherwise.
pub fn pairs_for<T: Scalar>(cfg: &RunConfig) -> CliResult<Vec<ImagePair<T>>> {
    if let Some(kind) = cfg.synth {
        return synth_pairs(kind, cfg.synth_size, cfg.synth_count, cfg.seed ^ STREAM_SYNTH)
            .map_err(CliError::from);
    }
    match &cfg.data {
        Some(root) => crate::dataset::load_pairs(root),
        None => Err(CliError::usage(
            "no dataset: pass --data <root> or --synth <kind>",
        )),
    }
}

pub fn run(cfg: RunConfig) -> CliResult<()> {
    match cfg.precision {
        Precision::Single => train_typed::<f32>(&cfg),
        Precision::Double => train_typed::<f64>(&cfg),
    }
}

fn checkpoint_path(cfg: &RunConfig) -> std::path::PathBuf {
    cfg.out.join("checkpoint.redc")
}

fn train_typed<T: Scalar>(cfg: &RunConfig) -> CliResult<()> {
    let pairs = pairs_for::<T>(cfg)?;
    if cfg.synth.is_some() {
        // materialize the generated dataset so fuse/eval can run on it later
        let data_dir = cfg.out.join("data");
        crate::dataset::write_pairs(&data_dir, &pairs)?;
        eprintln!("generated dataset written to {}", data_dir.display());
    }
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(cfg.seed ^ STREAM_MODEL);
    let model = FusionModel::register(&mut store, cfg.model_options(), InitMode::Train, &mut rng)
        .map_err(CliError::from)?;
    let mut opt: Adam<T> = Adam::new();

    std::fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, "create", e))?;
    let log_path = cfg.out.join("train.jsonl");
    let log_file =
        std::fs::File::create(&log_path).map_err(|e| io_err(&log_path, "create log", e))?;
    let mut log = std::io::BufWriter::new(log_file);

    let mut batch_seeds = SplitMix64::new(cfg.seed ^ STREAM_BATCH);
    let ckpt = checkpoint_path(cfg);
    let mut stdout = std::io::stdout().lock();
    for step in 0..cfg.steps {
        let batch = sample_patches(&pairs, cfg.patch, cfg.batch, batch_seeds.next_u64())
            .map_err(CliError::from)?;
        let report = match train_step(&batch.vis, &batch.ir, &model, &mut store, &mut opt, cfg.lr)
        {
            Ok(report) => report,
            Err(e @ (CoreError::Numeric(_) | CoreError::Inversion(_))) => {
                // the failed step never touched the parameters, so the store
                // still holds the last good state — preserve it for post-mortems
                log.flush().map_err(|e| io_err(&log_path, "flush log", e))?;
                checkpoint::save(&ckpt, cfg, &store)?;
                return Err(CliError::numeric(format!(
                    "step {step}: {e}; wrote the last good state to {}",
                    ckpt.display()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        let line = serde_json::json!({
            "step": step,
            "l_ssim": report.loss.l_ssim,
            "l_1": report.loss.l_1,
            "l_grad": report.loss.l_grad,
            "total": report.loss.total,
            "w": report.w,
            "live_bytes": report.memory.live_bytes,
            "peak_bytes": report.memory.peak_bytes,
        });
        writeln!(log, "{line}").map_err(|e| io_err(&log_path, "write log", e))?;
        writeln!(stdout, "{line}").map_err(|e| io_err(Path::new("stdout"), "write", e))?;
    }
    log.flush().map_err(|e| io_err(&log_path, "flush log", e))?;
    checkpoint::save(&ckpt, cfg, &store)?;
    eprintln!(
        "trained {} steps; checkpoint {}, log {}",
        cfg.steps,
        ckpt.display(),
        log_path.display()
    );
    Ok(())
}
