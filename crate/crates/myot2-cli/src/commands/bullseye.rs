//! 16-segment bullseye reports: JSON plus a rendered SVG, with an optional
//! difference mode against a previously written report.

use super::write_json;
use anyhow::{bail, Context, Result};
use myot2_core::evaluation::{
    aha_bullseye, bullseye_diff, pooled_centroid, render_bullseye_svg, render_diff_svg,
    BullseyeReport, Ring,
};
use myot2_core::io::{read_lbl, read_t2f};
use myot2_core::types::{CLASS_LV, CLASS_MYO, CLASS_RV};
use std::path::Path;

pub struct Args<'a> {
    pub t2: &'a Path,
    pub labels: &'a Path,
    pub out_json: &'a Path,
    pub out_svg: &'a Path,
    pub rings: Option<&'a str>,
    pub range: Option<&'a str>,
    pub title: Option<&'a str>,
    pub diff_against: Option<&'a Path>,
    pub limit: Option<f64>,
}

fn parse_rings(text: &str) -> Result<Vec<Ring>> {
    text.split(',')
        .map(|s| match s.trim() {
            "basal" => Ok(Ring::Basal),
            "mid" => Ok(Ring::Mid),
            "apical" => Ok(Ring::Apical),
            other => bail!("unknown ring '{other}' (expected basal, mid, or apical)"),
        })
        .collect()
}

fn parse_range(text: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        bail!("--range wants 'lo,hi', got '{text}'");
    }
    let lo: f64 = parts[0].trim().parse().context("range lo")?;
    let hi: f64 = parts[1].trim().parse().context("range hi")?;
    if !(hi > lo) {
        bail!("--range wants lo < hi, got {lo} >= {hi}");
    }
    Ok((lo, hi))
}

fn data_range(report: &BullseyeReport) -> (f64, f64) {
    let mut lo = report.center;
    let mut hi = report.center;
    for s in &report.segments {
        if let Some(m) = s.mean {
            lo = lo.min(m);
            hi = hi.max(m);
        }
    }
    if !lo.is_finite() || hi - lo < 1e-9 {
        // Degenerate or uniform data still needs a nonempty color scale.
        let mid = if lo.is_finite() { lo } else { 0.0 };
        (mid - 1.0, mid + 1.0)
    } else {
        (lo, hi)
    }
}

pub fn run(args: Args<'_>) -> Result<()> {
    let maps = read_t2f(args.t2).with_context(|| format!("reading {}", args.t2.display()))?;
    let masks =
        read_lbl(args.labels).with_context(|| format!("reading {}", args.labels.display()))?;
    let rings = match args.rings {
        Some(text) => parse_rings(text)?,
        None if maps.len() == 3 => vec![Ring::Basal, Ring::Mid, Ring::Apical],
        None => bail!(
            "{} slices: give --rings with one of basal/mid/apical per slice",
            maps.len()
        ),
    };
    let lv = pooled_centroid(&masks, CLASS_LV).context("no LV pixels for the centroid")?;
    let rv = pooled_centroid(&masks, CLASS_RV).context("no RV pixels for the centroid")?;
    let report = aha_bullseye(&maps, &masks, &rings, CLASS_MYO, lv, rv)?;

    if let Some(prev_path) = args.diff_against {
        let text = std::fs::read_to_string(prev_path)
            .with_context(|| format!("reading {}", prev_path.display()))?;
        let prev: BullseyeReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", prev_path.display()))?;
        let diff = bullseye_diff(&report, &prev)?;
        let limit = args.limit.unwrap_or_else(|| {
            let worst = diff
                .segments
                .iter()
                .filter_map(|s| s.as_ref().map(|d| d.abs()))
                .fold(diff.center.abs(), f64::max);
            if worst > 1e-9 {
                worst
            } else {
                1.0
            }
        });
        write_json(args.out_json, &diff)?;
        let svg = render_diff_svg(&diff, limit, args.title.unwrap_or("T2 difference"));
        std::fs::write(args.out_svg, svg)
            .with_context(|| format!("writing {}", args.out_svg.display()))?;
        println!("wrote difference bullseye to {}", args.out_svg.display());
    } else {
        let range = match args.range {
            Some(text) => parse_range(text)?,
            None => data_range(&report),
        };
        write_json(args.out_json, &report)?;
        let svg = render_bullseye_svg(&report, range, args.title.unwrap_or("T2 (ms)"));
        std::fs::write(args.out_svg, svg)
            .with_context(|| format!("writing {}", args.out_svg.display()))?;
        println!("wrote bullseye to {}", args.out_svg.display());
    }
    Ok(())
}
