//! Checkpoint inference: one forward pass per slice, writing the argmax
//! segmentation and the scaled sigmoid T2 map.

use crate::config::parse_ablation;
use anyhow::{bail, Context, Result};
use myot2_core::io::{read_ckpt, read_mev, write_lbl, write_t2f};
use myot2_core::relaxometry::normalize_minmax;
use myot2_core::sqnet::{infer, Ablation};
use myot2_core::train::slice_to_tensor;
use std::path::Path;

pub fn run(
    ckpt: &Path,
    input: &Path,
    out_seg: Option<&Path>,
    out_t2: Option<&Path>,
    ablation: Option<&str>,
) -> Result<()> {
    if out_seg.is_none() && out_t2.is_none() {
        bail!("give at least one of --out-seg and --out-t2");
    }
    let ablation = match ablation {
        Some(s) => parse_ablation(s)?,
        None => Ablation::Full,
    };
    if out_seg.is_some() && !ablation.has_seg() {
        bail!("--out-seg requested but the {ablation:?} ablation has no segmentation branch");
    }
    if out_t2.is_some() && !ablation.has_quant() {
        bail!("--out-t2 requested but the {ablation:?} ablation has no quantification branch");
    }

    let (meta, store) = read_ckpt(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let cfg = meta.config;
    let volume = read_mev(input).with_context(|| format!("reading {}", input.display()))?;
    if volume.num_echoes() != cfg.in_channels {
        bail!(
            "volume has {} echoes but the checkpoint expects {} input channels",
            volume.num_echoes(),
            cfg.in_channels
        );
    }
    if volume.height() != cfg.side || volume.width() != cfg.side {
        bail!(
            "volume is {}x{} but the checkpoint expects {}x{}",
            volume.height(),
            volume.width(),
            cfg.side,
            cfg.side
        );
    }
    let volume = normalize_minmax(&volume).context("normalizing volume")?;

    let mut segs = Vec::new();
    let mut maps = Vec::new();
    for s in 0..volume.slices() {
        let x = slice_to_tensor(&volume, s);
        let (seg, t2) = infer(&store, &cfg, &x, ablation);
        if let Some(seg) = seg {
            segs.push(seg);
        }
        if let Some(t2) = t2 {
            maps.push(t2);
        }
    }
    if let Some(path) = out_seg {
        write_lbl(path, &segs).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = out_t2 {
        write_t2f(path, &maps).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("inferred {} slices from {}", volume.slices(), input.display());
    Ok(())
}
