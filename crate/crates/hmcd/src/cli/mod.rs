//! The `hmcd` command line: dataset synthesis, training, evaluation, clip
//! classification, and feature heatmaps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or input-schema error.

mod eval;
mod heatmaps;
mod synth;
mod train;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;

fn long_version() -> String {
    format!(
        "{} (map schema {}, label schema {}, checkpoint schema {})",
        env!("CARGO_PKG_VERSION"),
        crate::MAP_SCHEMA_VERSION,
        crate::LABEL_SCHEMA_VERSION,
        crate::CHECKPOINT_SCHEMA_VERSION
    )
}

#[derive(Parser)]
#[command(
    name = "hmcd",
    about = "HD-map change detection pipeline",
    version,
    long_version = long_version()
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled change-detection dataset.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Train the detector on a synthesized dataset.
    Train {
        /// Run configuration (TOML or JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and loss CSV.
        #[arg(long)]
        out: PathBuf,
        /// Warm-start weights from an existing checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: P/R/F-score, mAP, PR curves.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics report JSON path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which metric headlines the printed summary.
        #[arg(long, value_parser = ["prf", "map"], default_value = "map")]
        headline: String,
        /// Also dump per-frame detections as JSON lines.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Classify whole clips by majority voting over per-frame detections.
    EvalClips {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with a clips.json manifest.
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render cross-difference feature heatmaps for one frame.
    Heatmaps {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory holding the frame.
        #[arg(long)]
        data: PathBuf,
        /// Frame id (e.g. clip0_000003).
        #[arg(long)]
        frame: String,
        #[arg(long)]
        out: PathBuf,
        /// Channels to render per scale.
        #[arg(long, default_value_t = 3)]
        channels: usize,
    },
}

#[derive(Subcommand)]
enum SynthKind {
    /// Isolated single-image dataset.
    Sicd(SynthArgs),
    /// Video-sequence dataset with propagated labels.
    Vscd(SynthArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// HD map JSON.
    #[arg(long)]
    map: PathBuf,
    /// Frames manifest (JSON lines with poses and intrinsics).
    #[arg(long)]
    frames: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed overriding the config's.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Schema(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Image(_)
        | Error::Contract(_)
        | Error::Checkpoint(_) => 2,
        Error::Shape(_) | Error::Geometry(_) | Error::Diverged(_) => 1,
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 on usage errors, 0 on --help/--version.
            e.exit();
        }
    };
    let result = match cli.command {
        Command::Synth { kind } => match kind {
            SynthKind::Sicd(args) => synth::run_synth(&args.map, &args.frames, &args.out, args.seed, args.config.as_deref(), false),
            SynthKind::Vscd(args) => synth::run_synth(&args.map, &args.frames, &args.out, args.seed, args.config.as_deref(), true),
        },
        Command::Train {
            config,
            data,
            out,
            init_from,
        } => train::run_train(config.as_deref(), &data, &out, init_from.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            report,
            config,
            headline,
            detections,
        } => eval::run_eval(
            &checkpoint,
            &data,
            &report,
            config.as_deref(),
            &headline,
            detections.as_deref(),
        ),
        Command::EvalClips {
            checkpoint,
            clips,
            report,
            config,
        } => eval::run_eval_clips(&checkpoint, &clips, &report, config.as_deref()),
        Command::Heatmaps {
            checkpoint,
            data,
            frame,
            out,
            channels,
        } => heatmaps::run_heatmaps(&checkpoint, &data, &frame, &out, channels),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
