//! Run configuration: defaults, flat key=value config files, and CLI flag
//! overrides, resolved in that order (defaults < file < flags).

use std::path::{Path, PathBuf};

use clap::Args;
use revfuse_core::chain::ModelOptions;
use revfuse_core::revnet::EstimatorConfig;
use revfuse_core::synth::SynthKind;

use crate::error::{io_err, CliError, CliResult};

/// Floating-point width every tensor in a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Precision> {
        match s {
            "single" => Some(Precision::Single),
            "double" => Some(Precision::Double),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

/// Everything a run needs to be reproducible. The same struct backs the
/// config file, the CLI flags, and the snapshot stored inside checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Chain length T (states run f_0..f_T).
    pub t: usize,
    /// Square training crop side.
    pub patch: usize,
    /// Patches per optimization step.
    pub batch: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Optimization step count.
    pub steps: usize,
    /// Root seed; every stream (weights, crops, synthetic data) derives from it.
    pub seed: u64,
    pub precision: Precision,
    /// Recompute chain states during backward instead of storing them.
    pub reverse1: bool,
    /// Recompute coupling activations inside the estimator during backward.
    pub reverse2: bool,
    /// Push noise estimates through the diffusion update (vs. raw residuals).
    pub ddim: bool,
    /// Estimator channels at the outer resolution level.
    pub width: usize,
    /// Coupling blocks per resolution level.
    pub blocks: usize,
    /// Generate the dataset instead of reading one from disk.
    pub synth: Option<SynthKind>,
    /// Side of generated images.
    pub synth_size: usize,
    /// Number of generated pairs.
    pub synth_count: usize,
    /// Dataset root holding `vis/` and `ir/` subdirectories of PGM files.
    pub data: Option<PathBuf>,
    /// Output root for checkpoints, logs, fused images, and reports.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            t: 2,
            patch: 32,
            batch: 4,
            lr: 1e-4,
            steps: 200,
            seed: 0,
            precision: Precision::Single,
            reverse1: true,
            reverse2: true,
            ddim: true,
            width: 8,
            blocks: 2,
            synth: None,
            synth_size: 64,
            synth_count: 8,
            data: None,
            out: PathBuf::from("out"),
        }
    }
}

/// Flag-level overrides shared by the commands that take a full config.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Flat key=value config file (same keys as the flags below)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Chain length T
    #[arg(long, value_name = "N")]
    pub t: Option<usize>,
    /// Square training crop side
    #[arg(long, value_name = "PX")]
    pub patch: Option<usize>,
    /// Patches per optimization step
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    /// Adam learning rate
    #[arg(long, value_name = "RATE")]
    pub lr: Option<f64>,
    /// Optimization step count
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
    /// Root RNG seed
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Float width: single | double
    #[arg(long, value_name = "KIND")]
    pub precision: Option<String>,
    /// Store chain states during backward instead of recomputing them
    #[arg(long)]
    pub no_reverse1: bool,
    /// Store coupling activations during backward instead of recomputing them
    #[arg(long)]
    pub no_reverse2: bool,
    /// Apply noise estimates raw instead of through the diffusion update
    #[arg(long)]
    pub no_ddim: bool,
    /// Synthetic dataset kind: complementary-halves | gradient-vs-texture | step-edges
    #[arg(long, value_name = "KIND")]
    pub synth: Option<String>,
    /// Side of generated images
    #[arg(long, value_name = "PX")]
    pub synth_size: Option<usize>,
    /// Number of generated pairs
    #[arg(long, value_name = "N")]
    pub synth_count: Option<usize>,
    /// Estimator channels at the outer resolution level (multiple of 8)
    #[arg(long, value_name = "CH")]
    pub width: Option<usize>,
    /// Coupling blocks per resolution level
    #[arg(long, value_name = "N")]
    pub blocks: Option<usize>,
    /// Dataset root holding vis/ and ir/ subdirectories
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output root
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CliError::usage(format!(
            "config key {key}: expected true/false, got {value:?}"
        ))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str, what: &str) -> CliResult<N> {
    value
        .parse::<N>()
        .map_err(|_| CliError::usage(format!("config key {key}: expected {what}, got {value:?}")))
}

impl RunConfig {
    /// Applies one `key=value` assignment. Shared by config files and the
    /// snapshot text stored in checkpoints.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "t" => self.t = parse_num(key, value, "a positive integer")?,
            "patch" => self.patch = parse_num(key, value, "a positive integer")?,
            "batch" => self.batch = parse_num(key, value, "a positive integer")?,
            "lr" => self.lr = parse_num(key, value, "a real number")?,
            "steps" => self.steps = parse_num(key, value, "an integer")?,
            "seed" => self.seed = parse_num(key, value, "an unsigned integer")?,
            "precision" => {
                self.precision = Precision::parse(value).ok_or_else(|| {
                    CliError::usage(format!(
                        "config key precision: expected single or double, got {value:?}"
                    ))
                })?
            }
            "reverse1" => self.reverse1 = parse_bool(key, value)?,
            "reverse2" => self.reverse2 = parse_bool(key, value)?,
            "ddim" => self.ddim = parse_bool(key, value)?,
            "width" => self.width = parse_num(key, value, "a positive integer")?,
            "blocks" => self.blocks = parse_num(key, value, "a positive integer")?,
            "synth" => {
                self.synth = Some(SynthKind::parse(value).ok_or_else(|| {
                    CliError::usage(format!(
                        "config key synth: unknown kind {value:?} (expected \
                         complementary-halves, gradient-vs-texture, or step-edges)"
                    ))
                })?)
            }
            "synth_size" => self.synth_size = parse_num(key, value, "a positive integer")?,
            "synth_count" => self.synth_count = parse_num(key, value, "a positive integer")?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            _ => {
                return Err(CliError::usage(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Parses a flat key=value config body onto `self`. Blank lines and
    /// `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::usage(format!(
                    "{origin} line {}: expected key=value, got {line:?}",
                    k + 1
                ))
            })?;
            self.apply_kv(key.trim(), value.trim())
                .map_err(|e| CliError {
                    code: e.code,
                    message: format!("{origin} line {}: {}", k + 1, e.message),
                })?;
        }
        Ok(())
    }

    /// Resolves defaults, then the config file, then flag overrides, and
    /// validates the result.
    pub fn resolve(o: &Overrides) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &o.config {
            let text =
                std::fs::read_to_string(path).map_err(|e| io_err(path, "read config", e))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        if let Some(v) = o.t {
            cfg.t = v;
        }
        if let Some(v) = o.patch {
            cfg.patch = v;
        }
        if let Some(v) = o.batch {
            cfg.batch = v;
        }
        if let Some(v) = o.lr {
            cfg.lr = v;
        }
        if let Some(v) = o.steps {
            cfg.steps = v;
        }
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(s) = &o.precision {
            cfg.precision = Precision::parse(s).ok_or_else(|| {
                CliError::usage(format!("--precision: expected single or double, got {s:?}"))
            })?;
        }
        if o.no_reverse1 {
            cfg.reverse1 = false;
        }
        if o.no_reverse2 {
            cfg.reverse2 = false;
        }
        if o.no_ddim {
            cfg.ddim = false;
        }
        if let Some(s) = &o.synth {
            cfg.synth = Some(SynthKind::parse(s).ok_or_else(|| {
                CliError::usage(format!(
                    "--synth: unknown kind {s:?} (expected complementary-halves, \
                     gradient-vs-texture, or step-edges)"
                ))
            })?);
        }
        if let Some(v) = o.synth_size {
            cfg.synth_size = v;
        }
        if let Some(v) = o.synth_count {
            cfg.synth_count = v;
        }
        if let Some(v) = o.width {
            cfg.width = v;
        }
        if let Some(v) = o.blocks {
            cfg.blocks = v;
        }
        if let Some(p) = &o.data {
            cfg.data = Some(p.clone());
        }
        if let Some(p) = &o.out {
            cfg.out = p.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rejects configs no command could run.
    pub fn validate(&self) -> CliResult<()> {
        if self.t == 0 {
            return Err(CliError::usage("t must be at least 1"));
        }
        if self.patch < 4 || self.patch % 4 != 0 {
            return Err(CliError::usage(format!(
                "patch must be a positive multiple of 4 (the estimator halves \
                 resolution twice), got {}",
                self.patch
            )));
        }
        if self.batch == 0 {
            return Err(CliError::usage("batch must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(CliError::usage(format!(
                "lr must be a positive real, got {}",
                self.lr
            )));
        }
        if self.width == 0 || self.width % 8 != 0 {
            return Err(CliError::usage(format!(
                "width must be a positive multiple of 8, got {}",
                self.width
            )));
        }
        if self.blocks == 0 {
            return Err(CliError::usage("blocks must be at least 1"));
        }
        if self.synth_size < 2 || self.synth_size % 2 != 0 {
            return Err(CliError::usage(format!(
                "synth_size must be an even side of at least 2, got {}",
                self.synth_size
            )));
        }
        if self.synth_count == 0 {
            return Err(CliError::usage("synth_count must be at least 1"));
        }
        Ok(())
    }

    /// Model-construction options implied by this config.
    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            t_steps: self.t,
            estimator: EstimatorConfig {
                width: self.width,
                blocks: self.blocks,
            },
            reverse1: self.reverse1,
            reverse2: self.reverse2,
            ddim: self.ddim,
        }
    }

    /// Canonical text form stored inside checkpoints. Filesystem locations
    /// (`data`, `out`) are machine-specific, not experiment state, so they
    /// are left out: the same experiment saved from two directories yields
    /// byte-identical checkpoints.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("t={}\n", self.t));
        s.push_str(&format!("patch={}\n", self.patch));
        s.push_str(&format!("batch={}\n", self.batch));
        s.push_str(&format!("lr={}\n", self.lr));
        s.push_str(&format!("steps={}\n", self.steps));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("precision={}\n", self.precision.name()));
        s.push_str(&format!("reverse1={}\n", self.reverse1));
        s.push_str(&format!("reverse2={}\n", self.reverse2));
        s.push_str(&format!("ddim={}\n", self.ddim));
        s.push_str(&format!("width={}\n", self.width));
        s.push_str(&format!("blocks={}\n", self.blocks));
        if let Some(kind) = self.synth {
            s.push_str(&format!("synth={}\n", kind.name()));
        }
        s.push_str(&format!("synth_size={}\n", self.synth_size));
        s.push_str(&format!("synth_count={}\n", self.synth_count));
        s
    }

    /// Rebuilds a config from a checkpoint snapshot. Malformed snapshots are
    /// data errors (the file is corrupt), not usage errors.
    pub fn from_snapshot(text: &str, origin: &Path) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, &format!("{} config snapshot", origin.display()))
            .map_err(|e| CliError::data(e.message))?;
        cfg.validate().map_err(|e| CliError::data(e.message))?;
        Ok(cfg)
    }
}
