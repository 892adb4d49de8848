//! Subcommand implementations and the helpers they share.

pub mod bench_noise;
pub mod bullseye;
pub mod eval;
pub mod fit;
pub mod infer;
pub mod phantom;
pub mod train;

use anyhow::{bail, Context, Result};
use myot2_core::evaluation::dice;
use myot2_core::io::{read_subject, SubjectData};
use myot2_core::types::{CLASS_LV, CLASS_MYO, CLASS_RV};
use myot2_core::{SegMap, T2Map};
use serde::Serialize;
use std::path::Path;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<(String, SubjectData)>> {
    let names = myot2_core::io::list_subjects(dir)
        .with_context(|| format!("listing subjects in {}", dir.display()))?;
    if names.is_empty() {
        bail!("no subjects found in {}", dir.display());
    }
    names
        .into_iter()
        .map(|name| {
            let subject = read_subject(dir, &name)
                .with_context(|| format!("reading subject '{name}' from {}", dir.display()))?;
            Ok((name, subject))
        })
        .collect()
}

/// Stacks per-slice label maps into one tall map so Dice pools every pixel
/// of the subject.
pub fn stack_slices(maps: &[SegMap]) -> Result<SegMap> {
    let first = maps.first().context("subject has no slices")?;
    let mut data = Vec::with_capacity(maps.len() * first.data.len());
    for m in maps {
        if m.height != first.height || m.width != first.width {
            bail!("slice shapes disagree: {}x{} vs {}x{}", m.height, m.width, first.height, first.width);
        }
        data.extend_from_slice(&m.data);
    }
    Ok(SegMap::new(first.height * maps.len(), first.width, data)?)
}

pub const FOREGROUND: [(&str, u8); 3] =
    [("lv", CLASS_LV), ("myo", CLASS_MYO), ("rv", CLASS_RV)];

/// Per-class Dice pooled over all slices of one subject, LV/MYO/RV order.
pub fn subject_dice(pred: &[SegMap], truth: &[SegMap]) -> Result<[f64; 3]> {
    let p = stack_slices(pred)?;
    let t = stack_slices(truth)?;
    let mut out = [0.0; 3];
    for (i, (_, class)) in FOREGROUND.iter().enumerate() {
        out[i] = dice(&p, &t, *class)?;
    }
    Ok(out)
}

/// Mean predicted and reference T2 over the reference myocardium mask,
/// pooled across slices. None when the subject has no myocardium pixels.
pub fn myo_t2_means(
    pred: &[T2Map],
    truth: &[T2Map],
    truth_labels: &[SegMap],
) -> Result<Option<(f64, f64)>> {
    if pred.len() != truth.len() || pred.len() != truth_labels.len() {
        bail!(
            "slice counts disagree: {} predicted, {} reference, {} label",
            pred.len(),
            truth.len(),
            truth_labels.len()
        );
    }
    let (mut sp, mut st, mut n) = (0.0, 0.0, 0usize);
    for ((p, t), l) in pred.iter().zip(truth).zip(truth_labels) {
        if p.height != l.height || p.width != l.width || t.height != l.height {
            bail!("map and label shapes disagree");
        }
        for (i, &label) in l.data.iter().enumerate() {
            if label == CLASS_MYO {
                sp += p.values_ms[i];
                st += t.values_ms[i];
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| (sp / n as f64, st / n as f64)))
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
