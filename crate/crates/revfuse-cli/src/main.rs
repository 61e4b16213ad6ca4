//! Command-line front end for the reversible-chain image fusion system.
//!
//! Commands: `train`, `fuse`, `eval`, `bench-mem`. Exit codes: 0 on
//! success, 1 for usage problems, 2 for data problems, 3 for numeric
//! failures. Every error is reported to stderr as a single line of the
//! form `error: <category>: <message>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use revfuse_cli::commands::{self, eval::EvalOpts, fuse::FuseOpts};
use revfuse_cli::config::{Overrides, RunConfig};
use revfuse_cli::error::EXIT_USAGE;

#[derive(Parser)]
#[command(
    name = "revfuse",
    version,
    about = "Reversible-chain visible/infrared image fusion: train, fuse, evaluate, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a fusion model and write a checkpoint plus a JSON-lines log
    Train(TrainArgs),
    /// Fuse full-resolution image pairs with a trained checkpoint
    Fuse(FuseArgs),
    /// Score fused images against their source pairs
    Eval(EvalArgs),
    /// Measure memory, speed, and gradient fidelity across modes and chain lengths
    BenchMem(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct FuseArgs {
    /// Trained checkpoint to load
    checkpoint: PathBuf,
    /// Dataset root holding vis/ and ir/ subdirectories
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output root (fused images land in <out>/fused)
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Mirror-pad inputs whose sides are not multiples of 4, crop the output back
    #[arg(long)]
    pad_to_even: bool,
    /// Apply noise estimates raw instead of through the diffusion update
    #[arg(long)]
    no_ddim: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset root holding vis/ and ir/ subdirectories
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Directory of fused *.pgm images to score
    #[arg(long, value_name = "DIR")]
    fused: PathBuf,
    /// Output root for metrics.json
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Score gradient-based metrics on [0,1] instead of the 0-255 convention
    #[arg(long)]
    unit_range: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return exit_for_clap(e),
    };
    let outcome = match cli.command {
        Cmd::Train(args) => RunConfig::resolve(&args.overrides).and_then(commands::train::run),
        Cmd::Fuse(args) => commands::fuse::run(FuseOpts {
            checkpoint: args.checkpoint,
            data: args.data,
            out: args.out,
            pad_to_even: args.pad_to_even,
            no_ddim: args.no_ddim,
        }),
        Cmd::Eval(args) => commands::eval::run(EvalOpts {
            data: args.data,
            fused: args.fused,
            out: args.out,
            unit_range: args.unit_range,
        }),
        Cmd::BenchMem(args) => RunConfig::resolve(&args.overrides).and_then(commands::bench::run),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::from(e.code)
        }
    }
}

/// Help and version requests succeed; anything else is a usage error whose
/// first stderr line is machine-parseable, followed by clap's rendering.
fn exit_for_clap(e: clap::Error) -> ExitCode {
    use clap::error::ErrorKind;
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        print!("{e}");
        return ExitCode::SUCCESS;
    }
    let rendered = e.to_string();
    let first = rendered
        .lines()
        .next()
        .unwrap_or("invalid arguments")
        .trim_start_matches("error: ");
    eprintln!("error: usage: {first}");
    for line in rendered.lines().skip(1) {
        eprintln!("{line}");
    }
    ExitCode::from(EXIT_USAGE)
}
