//! Noise-robustness harness: retrain at each input noise level with clean
//! references, evaluate on noisy held-out inputs, tabulate per-class Dice.

use super::{mean_sd, read_dataset, subject_dice, write_json};
use crate::config::TrainSettings;
use anyhow::{bail, Context, Result};
use myot2_core::io::SubjectData;
use myot2_core::seed_mix;
use myot2_core::sqnet::{infer, init_params, Ablation};
use myot2_core::synth::add_gaussian_noise;
use myot2_core::train::{build_items, slice_to_tensor, train, TrainOptions};
use myot2_core::relaxometry::normalize_minmax;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct NoiseRow {
    pub std: f64,
    pub lv: f64,
    pub myo: f64,
    pub rv: f64,
    pub average: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NoiseTable {
    pub levels: Vec<NoiseRow>,
}

fn parse_levels(text: &str) -> Result<Vec<f64>> {
    let levels: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("noise level '{s}'")))
        .collect::<Result<_>>()?;
    if levels.is_empty() {
        bail!("--levels must name at least one noise std");
    }
    for &l in &levels {
        if !(l >= 0.0) || !l.is_finite() {
            bail!("noise std must be nonnegative, got {l}");
        }
    }
    Ok(levels)
}

fn noisy_copy(subjects: &[(String, SubjectData)], std: f64, seed: u64) -> Result<Vec<SubjectData>> {
    subjects
        .iter()
        .enumerate()
        .map(|(i, (_, s))| {
            Ok(SubjectData {
                volume: add_gaussian_noise(&s.volume, std, seed_mix(seed, i as u64))?,
                labels: s.labels.clone(),
                t2: s.t2.clone(),
            })
        })
        .collect()
}

pub fn run(
    data: &Path,
    holdout: &Path,
    out: &Path,
    levels: &str,
    settings: &TrainSettings,
    seed: u64,
) -> Result<()> {
    let levels = parse_levels(levels)?;
    let train_set = read_dataset(data)?;
    let holdout_set = read_dataset(holdout)?;
    let cfg = settings.model.clone();

    let mut rows = Vec::with_capacity(levels.len());
    for (li, &std) in levels.iter().enumerate() {
        // Noisy inputs, clean labels and truth maps on both splits.
        let noisy_train = noisy_copy(&train_set, std, seed_mix(seed, 0xbe5c + li as u64))?;
        let items = build_items(&noisy_train)?;
        let mut store = init_params(&cfg, seed)?;
        let opts = TrainOptions {
            epochs: settings.epochs,
            batch_size: settings.batch_size,
            lr: settings.lr,
            seed,
            ablation: Ablation::Full,
            ..TrainOptions::default()
        };
        train(&mut store, &cfg, &items, &opts, |_| {})
            .with_context(|| format!("training at noise std {std}"))?;

        let noisy_holdout = noisy_copy(&holdout_set, std, seed_mix(seed, 0x401d + li as u64))?;
        let mut per_class: [Vec<f64>; 3] = Default::default();
        for subject in &noisy_holdout {
            let volume = normalize_minmax(&subject.volume)?;
            let mut segs = Vec::new();
            for s in 0..volume.slices() {
                let x = slice_to_tensor(&volume, s);
                let (seg, _) = infer(&store, &cfg, &x, Ablation::Full);
                segs.push(seg.expect("full ablation keeps the segmentation branch"));
            }
            let d = subject_dice(&segs, &subject.labels)?;
            for (i, v) in d.iter().enumerate() {
                per_class[i].push(*v);
            }
        }
        let m = |xs: &[f64]| mean_sd(xs).0;
        let (lv, myo, rv) = (m(&per_class[0]), m(&per_class[1]), m(&per_class[2]));
        let row = NoiseRow { std, lv, myo, rv, average: (lv + myo + rv) / 3.0 };
        println!(
            "noise {:.3}: Dice lv {:.4} myo {:.4} rv {:.4} avg {:.4}",
            row.std, row.lv, row.myo, row.rv, row.average
        );
        rows.push(row);
    }
    write_json(out, &NoiseTable { levels: rows })?;
    Ok(())
}
