//! `contourflow`: synthesize datasets, train, infer, evaluate and render overlays.

mod commands;
mod pgm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "contourflow",
    version,
    about = "Left-ventricle contouring on echo clips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 16)]
        val: usize,
        /// Falls back to $CONTOURFLOW_SEED, then the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one variant and keep the checkpoint with the lowest validation loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["pointreg", "dual", "dual-gru"])]
        variant: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict points, distance maps and contours for every frame of a clip.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// The clip's `.json` or `.tns` file inside a dataset directory.
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints on the validation split.
    Eval {
        /// `PATH` or `NAME=PATH`; the name defaults to the checkpoint's variant.
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; the text table goes next to it with a `.txt` extension.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 21, value_parser = clap::builder::TypedValueParser::map(
            clap::builder::PossibleValuesParser::new(["21", "18"]),
            |s: String| s.parse::<usize>().unwrap(),
        ))]
        contour_points: usize,
        /// Variant the improvements are measured against.
        #[arg(long, default_value = "pointreg")]
        baseline: String,
        /// Add a ground-truth predictor named "oracle" (test fixture).
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Write PGM overlays of predicted contours on the clip frames.
    Render {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write each heatmap channel as its own image.
        #[arg(long)]
        heatmaps: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            out,
            train,
            val,
            seed,
            config,
        } => commands::synth(&out, train, val, seed, config.as_deref()),
        Command::Train {
            data,
            out,
            variant,
            epochs,
            lambda,
            lr,
            seed,
            config,
        } => commands::train(&commands::TrainArgs {
            data,
            out,
            variant,
            epochs,
            lambda,
            lr,
            seed,
            config,
        }),
        Command::Infer { ckpt, clip, out } => commands::infer(&ckpt, &clip, &out),
        Command::Eval {
            ckpt,
            data,
            report,
            contour_points,
            baseline,
            oracle,
        } => commands::eval(&ckpt, &data, &report, contour_points, &baseline, oracle),
        Command::Render {
            pred,
            clip,
            out,
            heatmaps,
        } => commands::render(&pred, &clip, &out, heatmaps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
