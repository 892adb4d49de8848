//! Per-pixel curve fitting of a multi-echo volume into a T2 map stack.

use super::write_json;
use anyhow::{bail, Context, Result};
use myot2_core::io::{read_mev, write_t2f};
use myot2_core::relaxometry::{center_crop, fit_t2_map, normalize_minmax};
use myot2_core::{FitConfig, FitMode};
use serde::Serialize;
use std::path::Path;
use std::time::Instant;

/// The cited sequential per-subject runtime this implementation is measured
/// against in the timing report.
pub const BASELINE_SECONDS: f64 = 367.1;

#[derive(Serialize)]
struct TimingReport {
    pixels: usize,
    threads: usize,
    seconds: f64,
    baseline_seconds: f64,
    speedup_vs_baseline: f64,
}

pub fn run(
    input: &Path,
    out: &Path,
    crop: Option<usize>,
    mode: &str,
    timing: Option<&Path>,
) -> Result<()> {
    let mode = match mode {
        "joint" => FitMode::JointS0,
        "fixed-s0" => FitMode::FixedS0FirstEcho,
        other => bail!("unknown fit mode '{other}' (expected joint or fixed-s0)"),
    };
    let volume = read_mev(input).with_context(|| format!("reading {}", input.display()))?;
    let volume = normalize_minmax(&volume).context("normalizing volume")?;
    let volume = match crop {
        Some(side) => center_crop(&volume, side).context("cropping volume")?,
        None => volume,
    };
    let cfg = FitConfig { mode, ..FitConfig::default() };

    let started = Instant::now();
    let maps = (0..volume.slices())
        .map(|s| fit_t2_map(&volume, s, &cfg))
        .collect::<myot2_core::Result<Vec<_>>>()?;
    let seconds = started.elapsed().as_secs_f64();

    write_t2f(out, &maps).with_context(|| format!("writing {}", out.display()))?;
    let report = TimingReport {
        pixels: volume.slices() * volume.height() * volume.width(),
        threads: rayon::current_num_threads(),
        seconds,
        baseline_seconds: BASELINE_SECONDS,
        speedup_vs_baseline: BASELINE_SECONDS / seconds,
    };
    let timing_path = timing.map(Path::to_path_buf).unwrap_or_else(|| out.join("timing.json"));
    write_json(&timing_path, &report)?;
    println!(
        "fit {} pixels on {} threads in {:.3} s ({:.1}x the {:.1} s baseline)",
        report.pixels, report.threads, report.seconds, report.speedup_vs_baseline, BASELINE_SECONDS
    );
    Ok(())
}
