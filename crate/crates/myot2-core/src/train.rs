//! Mini-batch training loop for the dual-task network: seeded shuffling,
//! dynamic task weighting, Adam updates, and a structured per-epoch log.

use crate::autodiff::graph::Graph;
use crate::autodiff::optim::{AdamConfig, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::SubjectData;
use crate::losses::{loss_dual, loss_quant, loss_seg, DwaState, SsimConfig};
use crate::relaxometry::{normalize_minmax, MultiEchoVolume};
use crate::seed_mix;
use crate::sqnet::{forward, Ablation, ModelConfig, T2_SCALE_MS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// One supervised slice: normalized echo images, per-pixel class labels in
/// row-major order, and the reference map scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: Tensor,
    pub labels: Vec<u8>,
    pub t2_norm: Tensor,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub ssim: SsimConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            ablation: Ablation::Full,
            ssim: SsimConfig::default(),
        }
    }
}

/// One line of the training log. Weights always sum to 1; a missing loss
/// means that branch was ablated away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogEntry {
    pub epoch: usize,
    pub l_quant: Option<f64>,
    pub l_seg: Option<f64>,
    pub w1: f64,
    pub w2: f64,
    pub l_mt: f64,
    pub wall_time_s: f64,
}

/// Copies one slice of a volume into a [1, C, H, W] tensor, echo as channel.
pub fn slice_to_tensor(v: &MultiEchoVolume, slice: usize) -> Tensor {
    assert!(slice < v.slices(), "slice {} out of range 0..{}", slice, v.slices());
    let (c, h, w) = (v.num_echoes(), v.height(), v.width());
    let mut data = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                data.push(v.get(slice, ci, hi, wi));
            }
        }
    }
    Tensor::new([1, c, h, w], data)
}

/// Expands subjects into per-slice training items. Each subject's volume is
/// jointly min-max normalized; truth maps divide by the fixed output scale.
pub fn build_items(subjects: &[SubjectData]) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for subject in subjects {
        let normed = normalize_minmax(&subject.volume)?;
        for s in 0..normed.slices() {
            let truth = &subject.t2[s];
            let (h, w) = (truth.height, truth.width);
            let t2_norm = Tensor::new(
                [1, 1, h, w],
                truth.values_ms.iter().map(|&v| (v / T2_SCALE_MS).clamp(0.0, 1.0)).collect(),
            );
            items.push(TrainItem {
                image: slice_to_tensor(&normed, s),
                labels: subject.labels[s].data.clone(),
                t2_norm,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    Ok(items)
}

fn check_items(cfg: &ModelConfig, items: &[TrainItem]) -> Result<()> {
    let want_img = [1, cfg.in_channels, cfg.side, cfg.side];
    let want_map = [1, 1, cfg.side, cfg.side];
    for (i, item) in items.iter().enumerate() {
        if item.image.shape() != want_img {
            return Err(Error::ConfigMismatch(format!(
                "item {i} image shape {:?}, model wants {:?}",
                item.image.shape(),
                want_img
            )));
        }
        if item.t2_norm.shape() != want_map {
            return Err(Error::ConfigMismatch(format!(
                "item {i} truth shape {:?}, model wants {:?}",
                item.t2_norm.shape(),
                want_map
            )));
        }
        if item.labels.len() != cfg.side * cfg.side {
            return Err(Error::ConfigMismatch(format!(
                "item {i} has {} labels, model wants {}",
                item.labels.len(),
                cfg.side * cfg.side
            )));
        }
    }
    Ok(())
}

fn stack_batch(items: &[TrainItem], order: &[usize]) -> (Tensor, Tensor, Vec<u8>) {
    let n = order.len();
    let img_len = items[0].image.numel();
    let map_len = items[0].t2_norm.numel();
    let mut images = Vec::with_capacity(n * img_len);
    let mut maps = Vec::with_capacity(n * map_len);
    let mut labels = Vec::with_capacity(n * items[0].labels.len());
    for &i in order {
        images.extend_from_slice(items[i].image.data());
        maps.extend_from_slice(items[i].t2_norm.data());
        labels.extend_from_slice(&items[i].labels);
    }
    let img_shape = items[0].image.shape();
    let (c, h, w) = (img_shape[1], img_shape[2], img_shape[3]);
    (Tensor::new([n, c, h, w], images), Tensor::new([n, 1, h, w], maps), labels)
}

/// Runs the optimization loop, invoking `on_epoch` with each finished log
/// entry. Task weights come from dynamic weight averaging when both branches
/// are active and are constant within an epoch.
pub fn train(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    items: &[TrainItem],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&TrainingLogEntry),
) -> Result<Vec<TrainingLogEntry>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
    }
    check_items(cfg, items)?;
    let adam = AdamConfig { lr: opts.lr, ..AdamConfig::default() };
    let mut dwa = DwaState::default();
    let mut log = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        let (w1, w2) = match opts.ablation {
            Ablation::Full => dwa.weights(),
            Ablation::QuantOnly => (1.0, 0.0),
            Ablation::SegOnly => (0.0, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(opts.seed, 0x5f0c + epoch as u64));
        order.shuffle(&mut rng);
        let mut sum_quant = 0.0;
        let mut sum_seg = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(opts.batch_size).enumerate() {
            let (images, maps, labels) = stack_batch(items, chunk);
            let mut g = Graph::new();
            let x = g.input(images);
            let dropout_seed = seed_mix(opts.seed, ((epoch as u64) << 24) | bi as u64);
            let out = forward(&mut g, store, x, cfg, opts.ablation, true, dropout_seed);
            let lq = out.t2_pred.map(|pred| {
                let truth = g.input(maps);
                loss_quant(&mut g, truth, pred, &opts.ssim)
            });
            let ls = out.seg_logits.as_ref().map(|logits| loss_seg(&mut g, logits, &labels));
            let total = match (lq, ls) {
                (Some(a), Some(b)) => loss_dual(&mut g, a, b, w1, w2),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("forward always keeps at least one branch"),
            };
            let total_value = g.value(total).item();
            if !total_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} batch {bi}: loss {total_value}"
                )));
            }
            let grads = g.backward(total);
            let named = g.param_grads(&grads);
            store.adam_step(&named, &adam)?;
            let b = chunk.len() as f64;
            if let Some(a) = lq {
                sum_quant += g.value(a).item() * b;
            }
            if let Some(s) = ls {
                sum_seg += g.value(s).item() * b;
            }
            seen += chunk.len();
        }
        let n = seen as f64;
        let mean_quant = opts.ablation.has_quant().then(|| sum_quant / n);
        let mean_seg = opts.ablation.has_seg().then(|| sum_seg / n);
        let l_mt = match (mean_quant, mean_seg) {
            (Some(q), Some(s)) => w1 * q + w2 * s,
            (Some(q), None) => q,
            (None, Some(s)) => s,
            (None, None) => unreachable!(),
        };
        if let (Some(q), Some(s)) = (mean_quant, mean_seg) {
            dwa.update(q, s)?;
        }
        let entry = TrainingLogEntry {
            epoch,
            l_quant: mean_quant,
            l_seg: mean_seg,
            w1,
            w2,
            l_mt,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sqnet::init_params;
    use crate::synth::{gen_phantom, PhantomSpec};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            side: 32,
            in_channels: 2,
            patch: 8,
            dim: 16,
            heads: 2,
            depth: [1, 1, 1],
            cnn_channels: [8, 16, 32],
            num_classes: 4,
            dropout: 0.1,
        }
    }

    fn tiny_spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            side: 32,
            lv_radius: 4.0,
            myo_radii: (4.0, 6.5),
            rv_offset: 8.0,
            rv_radius: 4.5,
            echoes_ms: vec![0.0, 35.0],
            ..PhantomSpec::base(seed)
        }
    }

    fn tiny_items(n: u64) -> Vec<TrainItem> {
        let subjects: Vec<SubjectData> = (0..n)
            .map(|i| {
                let s = gen_phantom(&tiny_spec(i)).unwrap();
                SubjectData { volume: s.volume, labels: vec![s.labels], t2: vec![s.t2_truth] }
            })
            .collect();
        build_items(&subjects).unwrap()
    }

    #[test]
    fn build_items_normalizes_and_scales() {
        let items = tiny_items(1);
        assert_eq!(items.len(), 1);
        let img = items[0].image.data();
        let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        let t = items[0].t2_norm.data();
        assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Blood pool truth is 180 ms, which lands at 0.9 after scaling.
        assert!(t.iter().any(|&v| (v - 0.9).abs() < 1e-12));
        assert_eq!(items[0].labels.len(), 32 * 32);
    }

    #[test]
    fn loss_decreases_on_a_small_problem() {
        let cfg = tiny_cfg();
        let items = tiny_items(2);
        let mut store = init_params(&cfg, 7).unwrap();
        let opts = TrainOptions { epochs: 5, batch_size: 2, seed: 11, ..TrainOptions::default() };
        let log = train(&mut store, &cfg, &items, &opts, |_| {}).unwrap();
        assert_eq!(log.len(), 5);
        assert!(
            log.last().unwrap().l_mt < log[0].l_mt,
            "loss should fall: first {} last {}",
            log[0].l_mt,
            log.last().unwrap().l_mt
        );
    }

    #[test]
    fn log_weights_sum_to_one_and_pin_early() {
        let cfg = tiny_cfg();
        let items = tiny_items(2);
        let mut store = init_params(&cfg, 7).unwrap();
        let opts = TrainOptions { epochs: 4, batch_size: 4, seed: 3, ..TrainOptions::default() };
        let log = train(&mut store, &cfg, &items, &opts, |_| {}).unwrap();
        for e in &log {
            assert!((e.w1 + e.w2 - 1.0).abs() < 1e-12, "epoch {}: {} + {}", e.epoch, e.w1, e.w2);
            assert!(e.l_quant.is_some() && e.l_seg.is_some());
        }
        // The first two epochs run with pinned equal weights.
        assert_eq!(log[0].w1, 0.5);
        assert_eq!(log[1].w1, 0.5);
        assert_eq!(log[0].epoch, 1);
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let cfg = tiny_cfg();
        let items = tiny_items(2);
        let opts = TrainOptions { epochs: 2, batch_size: 2, seed: 9, ..TrainOptions::default() };
        let mut s1 = init_params(&cfg, 1).unwrap();
        let mut s2 = init_params(&cfg, 1).unwrap();
        let l1 = train(&mut s1, &cfg, &items, &opts, |_| {}).unwrap();
        let l2 = train(&mut s2, &cfg, &items, &opts, |_| {}).unwrap();
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a.l_quant, b.l_quant);
            assert_eq!(a.l_seg, b.l_seg);
            assert_eq!(a.w1, b.w1);
            assert_eq!(a.l_mt, b.l_mt);
        }
        for ((na, ta), (nb, tb)) in s1.iter().zip(s2.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "parameter {na} drifted between identical runs");
        }
    }

    #[test]
    fn ablated_training_logs_fixed_weights() {
        let cfg = tiny_cfg();
        let items = tiny_items(1);
        let mut store = init_params(&cfg, 2).unwrap();
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 1,
            seed: 5,
            ablation: Ablation::SegOnly,
            ..TrainOptions::default()
        };
        let log = train(&mut store, &cfg, &items, &opts, |_| {}).unwrap();
        assert_eq!(log[0].w1, 0.0);
        assert_eq!(log[0].w2, 1.0);
        assert!(log[0].l_quant.is_none());
        assert_eq!(log[0].l_mt, log[0].l_seg.unwrap());
    }

    #[test]
    fn mismatched_items_are_rejected() {
        let cfg = tiny_cfg();
        let mut items = tiny_items(1);
        items[0].labels.pop();
        let mut store = init_params(&cfg, 2).unwrap();
        let opts = TrainOptions { epochs: 1, ..TrainOptions::default() };
        assert!(matches!(
            train(&mut store, &cfg, &items, &opts, |_| {}),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
