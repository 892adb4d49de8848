//! `myot2`: command-line pipeline for myocardial T2 mapping. Subcommands
//! cover per-pixel curve fitting, phantom generation, network training,
//! inference, evaluation reports, bullseye plots, and a noise-robustness
//! harness. Every subcommand is deterministic for a fixed --seed and thread
//! count (wall-time fields in logs and timing reports aside).

mod commands;
mod config;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "myot2", version, about = "Myocardial T2 mapping toolkit")]
struct Cli {
    /// Base seed for every random choice the subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker thread count (env MYOT2_THREADS is the fallback; default:
    /// all cores). Results never depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML file with defaults for training options and the model shape.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit per-pixel T2 maps from a multi-echo volume.
    Fit {
        /// Input .mev directory.
        #[arg(long)]
        input: PathBuf,
        /// Output .t2f directory.
        #[arg(long)]
        out: PathBuf,
        /// Center-crop the volume to this square side before fitting.
        #[arg(long)]
        crop: Option<usize>,
        /// Fit mode: "joint" profiles s0 per candidate, "fixed-s0" pins it
        /// to the first echo.
        #[arg(long, default_value = "joint")]
        mode: String,
        /// Where to write the timing report (default: <out>/timing.json).
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Generate synthetic cardiac phantom subjects.
    Phantom {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of base phantoms.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Expand each base phantom into its 8 augmentation variants.
        #[arg(long)]
        augment: bool,
        /// Additive Gaussian noise std on the echo images (labels and truth
        /// maps stay noise-free).
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train the dual-task network on a dataset directory.
    Train {
        /// Dataset directory of <name>.mev / <name>.lbl / <name>.t2f triples.
        #[arg(long)]
        data: PathBuf,
        /// Output .ckpt directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log path.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// One of: full, seg-only, quant-only.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Run a trained checkpoint on a multi-echo volume.
    Infer {
        /// Checkpoint .ckpt directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Input .mev directory.
        #[arg(long)]
        input: PathBuf,
        /// Output .lbl directory for the segmentation.
        #[arg(long)]
        out_seg: Option<PathBuf>,
        /// Output .t2f directory for the predicted map.
        #[arg(long)]
        out_t2: Option<PathBuf>,
        /// Branch selection; must match how the checkpoint was trained.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Compare predictions against reference labels and maps.
    Eval {
        /// Directory of predicted <name>.lbl / <name>.t2f pairs.
        #[arg(long)]
        pred: PathBuf,
        /// Directory holding the matching reference subjects.
        #[arg(long)]
        truth: PathBuf,
        /// Output metrics JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the 17-segment bullseye summary of a T2 map stack.
    Bullseye {
        /// .t2f directory with one map per slice.
        #[arg(long)]
        t2: PathBuf,
        /// .lbl directory with the matching segmentations.
        #[arg(long)]
        labels: PathBuf,
        /// Output report JSON path.
        #[arg(long)]
        out_json: PathBuf,
        /// Output SVG path.
        #[arg(long)]
        out_svg: PathBuf,
        /// Comma-separated ring per slice (basal,mid,apical). Defaults to
        /// that order for a 3-slice stack.
        #[arg(long)]
        rings: Option<String>,
        /// Color range "lo,hi" in ms for the SVG (default: data range).
        #[arg(long)]
        range: Option<String>,
        /// Plot title.
        #[arg(long)]
        title: Option<String>,
        /// Previously written report JSON to subtract; outputs become a
        /// difference report.
        #[arg(long)]
        diff_against: Option<PathBuf>,
        /// Symmetric color limit for the difference SVG (default: data).
        #[arg(long)]
        limit: Option<f64>,
    },
    /// Retrain under input noise and report per-class Dice per level.
    BenchNoise {
        /// Clean training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Clean held-out dataset directory.
        #[arg(long)]
        holdout: PathBuf,
        /// Output table JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated noise standard deviations.
        #[arg(long, default_value = "0.01,0.03,0.05")]
        levels: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MYOT2_THREADS") {
        Ok(v) => {
            let n: usize =
                v.parse().with_context(|| format!("MYOT2_THREADS must be a number, got '{v}'"))?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = resolve_threads(cli.threads)? {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialized")?;
    }
    let run_cfg = config::load(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Fit { input, out, crop, mode, timing } => {
            commands::fit::run(&input, &out, crop, &mode, timing.as_deref())
        }
        Cmd::Phantom { out, count, augment, noise } => {
            commands::phantom::run(&out, count, augment, noise, seed)
        }
        Cmd::Train { data, out, log, epochs, lr, batch_size, ablation } => {
            let settings = config::resolve_train(
                &run_cfg,
                epochs,
                lr,
                batch_size,
                ablation.as_deref(),
            )?;
            commands::train::run(&data, &out, &log, &settings, seed)
        }
        Cmd::Infer { ckpt, input, out_seg, out_t2, ablation } => commands::infer::run(
            &ckpt,
            &input,
            out_seg.as_deref(),
            out_t2.as_deref(),
            ablation.as_deref(),
        ),
        Cmd::Eval { pred, truth, out } => commands::eval::run(&pred, &truth, &out),
        Cmd::Bullseye {
            t2,
            labels,
            out_json,
            out_svg,
            rings,
            range,
            title,
            diff_against,
            limit,
        } => commands::bullseye::run(commands::bullseye::Args {
            t2: &t2,
            labels: &labels,
            out_json: &out_json,
            out_svg: &out_svg,
            rings: rings.as_deref(),
            range: range.as_deref(),
            title: title.as_deref(),
            diff_against: diff_against.as_deref(),
            limit,
        }),
        Cmd::BenchNoise { data, holdout, out, levels, epochs, lr, batch_size } => {
            let settings = config::resolve_train(&run_cfg, epochs, lr, batch_size, None)?;
            commands::bench_noise::run(&data, &holdout, &out, &levels, &settings, seed)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
