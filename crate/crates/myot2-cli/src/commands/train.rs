//! Network training: dataset loading, the optimization loop, the JSON-lines
//! log, and the final checkpoint.

use super::read_dataset;
use crate::config::TrainSettings;
use anyhow::{Context, Result};
use myot2_core::io::{write_ckpt, CheckpointMeta};
use myot2_core::sqnet::init_params;
use myot2_core::train::{build_items, train, TrainOptions};
use std::io::Write;
use std::path::Path;

pub fn run(
    data: &Path,
    out: &Path,
    log_path: &Path,
    settings: &TrainSettings,
    seed: u64,
) -> Result<()> {
    let dataset = read_dataset(data)?;
    let subjects: Vec<_> = dataset.into_iter().map(|(_, s)| s).collect();
    let items = build_items(&subjects).context("preparing training items")?;

    let cfg = settings.model.clone();
    let mut store = init_params(&cfg, seed)?;
    let opts = TrainOptions {
        epochs: settings.epochs,
        batch_size: settings.batch_size,
        lr: settings.lr,
        seed,
        ablation: settings.ablation,
        ..TrainOptions::default()
    };

    if let Some(parent) = log_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut log_file = std::fs::File::create(log_path)
        .with_context(|| format!("creating log {}", log_path.display()))?;

    let entries = train(&mut store, &cfg, &items, &opts, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        writeln!(log_file, "{line}").expect("log write");
        log_file.flush().expect("log flush");
    })
    .context("training")?;

    let meta = CheckpointMeta { config: cfg, seed, epoch: entries.len() };
    write_ckpt(out, &meta, &store).with_context(|| format!("writing {}", out.display()))?;
    let last = entries.last().expect("at least one epoch ran");
    println!(
        "trained {} items for {} epochs, final loss {:.6}, checkpoint at {}",
        items.len(),
        entries.len(),
        last.l_mt,
        out.display()
    );
    Ok(())
}
