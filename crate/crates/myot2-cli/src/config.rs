//! Optional TOML configuration and flag resolution. Precedence is
//! command-line flag, then config file, then built-in default.

use anyhow::{bail, Context, Result};
use myot2_core::sqnet::{Ablation, ModelConfig};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    /// One of: full, seg-only, quant-only.
    pub ablation: Option<String>,
    /// Full model shape; omitted fields are not supported, give all of them.
    pub model: Option<ModelConfig>,
}

pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn parse_ablation(s: &str) -> Result<Ablation> {
    match s {
        "full" => Ok(Ablation::Full),
        "seg-only" | "seg_only" => Ok(Ablation::SegOnly),
        "quant-only" | "quant_only" => Ok(Ablation::QuantOnly),
        other => bail!("unknown ablation '{other}' (expected full, seg-only, or quant-only)"),
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ablation: Ablation,
    pub model: ModelConfig,
}

pub fn resolve_train(
    run: &RunConfig,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    ablation: Option<&str>,
) -> Result<TrainSettings> {
    let epochs = epochs.or(run.epochs).unwrap_or(200);
    let lr = lr.or(run.lr).unwrap_or(1e-3);
    let batch_size = batch_size.or(run.batch_size).unwrap_or(4);
    if epochs == 0 {
        bail!("epochs must be at least 1");
    }
    if !(lr > 0.0) || !lr.is_finite() {
        bail!("learning rate must be positive, got {lr}");
    }
    if batch_size == 0 {
        bail!("batch size must be at least 1");
    }
    let ablation = match ablation.or(run.ablation.as_deref()) {
        Some(s) => parse_ablation(s)?,
        None => Ablation::Full,
    };
    let model = run.model.clone().unwrap_or_default();
    model.validate().context("model config")?;
    Ok(TrainSettings { epochs, lr, batch_size, ablation, model })
}
