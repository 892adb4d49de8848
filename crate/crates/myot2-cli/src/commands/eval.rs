//! Prediction-versus-reference metrics: per-class Dice across subjects,
//! per-subject myocardial mean T2 pairs, Bland-Altman agreement, Pearson r.

use super::{mean_sd, myo_t2_means, subject_dice, write_json, FOREGROUND};
use anyhow::{bail, Context, Result};
use myot2_core::error::Error;
use myot2_core::evaluation::{bland_altman, pearson};
use myot2_core::io::{read_lbl, read_t2f};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct DiceStat {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DiceSection {
    pub lv: DiceStat,
    pub myo: DiceStat,
    pub rv: DiceStat,
    pub average: DiceStat,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MyoPair {
    pub subject: String,
    pub pred_ms: f64,
    pub truth_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BaSection {
    pub bias: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub coverage: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub subjects: Vec<String>,
    pub dice: DiceSection,
    pub myo_t2_pairs: Vec<MyoPair>,
    pub bland_altman: Option<BaSection>,
    pub pearson_r: Option<f64>,
}

/// Subject names in `dir` that have both a .lbl and a .t2f artifact.
fn pred_subjects(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        let file_name = entry.file_name();
        let Some(text) = file_name.to_str() else { continue };
        if let Some(stem) = text.strip_suffix(".lbl") {
            if dir.join(format!("{stem}.t2f")).is_dir() {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn compute(pred: &Path, truth: &Path) -> Result<EvalReport> {
    let names = pred_subjects(pred)?;
    if names.is_empty() {
        bail!("no predicted subjects (.lbl + .t2f pairs) in {}", pred.display());
    }
    let mut per_class: [Vec<f64>; 3] = Default::default();
    let mut averages = Vec::new();
    let mut pairs = Vec::new();
    for name in &names {
        let p_lbl = read_lbl(&pred.join(format!("{name}.lbl")))?;
        let p_t2 = read_t2f(&pred.join(format!("{name}.t2f")))?;
        let t_lbl_path = truth.join(format!("{name}.lbl"));
        let t_t2_path = truth.join(format!("{name}.t2f"));
        if !t_lbl_path.is_dir() || !t_t2_path.is_dir() {
            bail!("subject '{name}' has no reference in {}", truth.display());
        }
        let t_lbl = read_lbl(&t_lbl_path)?;
        let t_t2 = read_t2f(&t_t2_path)?;
        if p_lbl.len() != t_lbl.len() {
            bail!("subject '{name}': {} predicted slices vs {} reference", p_lbl.len(), t_lbl.len());
        }
        let d = subject_dice(&p_lbl, &t_lbl).with_context(|| format!("subject '{name}'"))?;
        for (i, v) in d.iter().enumerate() {
            per_class[i].push(*v);
        }
        averages.push(d.iter().sum::<f64>() / d.len() as f64);
        if let Some((pred_ms, truth_ms)) =
            myo_t2_means(&p_t2, &t_t2, &t_lbl).with_context(|| format!("subject '{name}'"))?
        {
            pairs.push(MyoPair { subject: name.clone(), pred_ms, truth_ms });
        }
    }

    let stat = |xs: &[f64]| {
        let (mean, sd) = mean_sd(xs);
        DiceStat { mean, sd }
    };
    let dice = DiceSection {
        lv: stat(&per_class[0]),
        myo: stat(&per_class[1]),
        rv: stat(&per_class[2]),
        average: stat(&averages),
    };
    debug_assert_eq!(FOREGROUND[0].0, "lv");

    let preds: Vec<f64> = pairs.iter().map(|p| p.pred_ms).collect();
    let truths: Vec<f64> = pairs.iter().map(|p| p.truth_ms).collect();
    let bland = if pairs.len() >= 2 {
        let ba = bland_altman(&preds, &truths)?;
        Some(BaSection {
            bias: ba.bias,
            sd: ba.sd,
            lower: ba.lower,
            upper: ba.upper,
            coverage: ba.coverage,
        })
    } else {
        None
    };
    let pearson_r = if pairs.len() >= 2 {
        match pearson(&preds, &truths) {
            Ok(r) => Some(r),
            Err(Error::ZeroVariance) => {
                eprintln!("pearson r undefined: zero variance across subjects");
                None
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };

    Ok(EvalReport { subjects: names, dice, myo_t2_pairs: pairs, bland_altman: bland, pearson_r })
}

pub fn run(pred: &Path, truth: &Path, out: &Path) -> Result<()> {
    let report = compute(pred, truth)?;
    write_json(out, &report)?;
    println!(
        "evaluated {} subjects: average Dice {:.4}, MYO bias {}",
        report.subjects.len(),
        report.dice.average.mean,
        report
            .bland_altman
            .as_ref()
            .map(|b| format!("{:.3} ms", b.bias))
            .unwrap_or_else(|| "n/a".to_string()),
    );
    Ok(())
}
