//! Training losses: SSIM-based quantification loss, multi-scale segmentation
//! cross-entropy, and dynamic weight averaging between the two tasks.

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// SSIM settings. Defaults: 11x11 Gaussian window with sigma 1.5,
/// k1 = 0.01, k2 = 0.03, dynamic range 1 (maps are normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

/// Normalized 2-D Gaussian window (weights sum to 1).
fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    assert!(size >= 1 && size % 2 == 1, "window must be odd, got {}", size);
    assert!(sigma > 0.0, "sigma must be positive");
    let half = (size / 2) as f64;
    let one_d: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut data = Vec::with_capacity(size * size);
    for y in &one_d {
        for x in &one_d {
            data.push(y * x);
        }
    }
    let sum: f64 = data.iter().sum();
    for v in &mut data {
        *v /= sum;
    }
    Tensor::new([1, 1, size, size], data)
}

/// Mean local SSIM index between two stacks of single-channel images
/// [N,1,H,W], built from differentiable ops. Local statistics come from a
/// Gaussian-weighted window slid over all fully-interior positions (valid
/// convolution, no padding). Symmetric in its arguments and 1 when a == b.
pub fn ssim_node(g: &mut Graph, a: NodeId, b: NodeId, cfg: &SsimConfig) -> NodeId {
    let sa = g.shape(a).to_vec();
    assert_eq!(sa, g.shape(b), "ssim inputs {:?} vs {:?}", sa, g.shape(b));
    assert_eq!(sa.len(), 4, "ssim wants [N,1,H,W], got {:?}", sa);
    assert_eq!(sa[1], 1, "ssim is defined on single-channel maps, got {:?}", sa);
    let mut win = cfg.window.min(sa[2]).min(sa[3]);
    if win % 2 == 0 {
        win -= 1; // keep the window odd so it has a center
    }
    assert!(win >= 1, "image {:?} too small for any window", sa);

    let c1 = (cfg.k1 * cfg.range) * (cfg.k1 * cfg.range);
    let c2 = (cfg.k2 * cfg.range) * (cfg.k2 * cfg.range);
    let w = g.input(gaussian_window(win, cfg.sigma));

    let mu_a = g.conv2d(a, w, 1, 0);
    let mu_b = g.conv2d(b, w, 1, 0);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_aa = g.conv2d(aa, w, 1, 0);
    let e_bb = g.conv2d(bb, w, 1, 0);
    let e_ab = g.conv2d(ab, w, 1, 0);

    let mu_ab = g.mul(mu_a, mu_b);
    let mu_a2 = g.mul(mu_a, mu_a);
    let mu_b2 = g.mul(mu_b, mu_b);
    let var_a = g.sub(e_aa, mu_a2);
    let var_b = g.sub(e_bb, mu_b2);
    let cov = g.sub(e_ab, mu_ab);

    // ((2*mu_ab + c1) * (2*cov + c2)) / ((mu_a2 + mu_b2 + c1) * (var_a + var_b + c2))
    let n1 = g.scale(mu_ab, 2.0);
    let n1 = g.add_scalar(n1, c1);
    let n2 = g.scale(cov, 2.0);
    let n2 = g.add_scalar(n2, c2);
    let num = g.mul(n1, n2);
    let d1 = g.add(mu_a2, mu_b2);
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(var_a, var_b);
    let d2 = g.add_scalar(d2, c2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    g.mean_all(map)
}

/// Plain-value SSIM between two equally shaped 2-D maps.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> f64 {
    assert_eq!(a.shape(), b.shape(), "ssim shapes {:?} vs {:?}", a.shape(), b.shape());
    assert_eq!(a.rank(), 2, "ssim value form wants [H,W], got {:?}", a.shape());
    let (h, w) = (a.dim(0), a.dim(1));
    let mut g = Graph::new();
    let an = g.input(a.clone().reshaped([1, 1, h, w]));
    let bn = g.input(b.clone().reshaped([1, 1, h, w]));
    let s = ssim_node(&mut g, an, bn, cfg);
    g.value(s).item()
}

/// Quantification loss: `1 - SSIM(truth, prediction)`. Zero iff the maps agree
/// everywhere; gradient flows into the prediction.
pub fn loss_quant(g: &mut Graph, truth: NodeId, pred: NodeId, cfg: &SsimConfig) -> NodeId {
    let s = ssim_node(g, truth, pred, cfg);
    let neg = g.scale(s, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Deep-supervision segmentation loss: mean over the supervised scales of the
/// pixel-mean cross-entropy against the same full-resolution labels. Every
/// logits tensor must already be at label resolution.
pub fn loss_seg(g: &mut Graph, seg_logits: &[NodeId], labels: &[u8]) -> NodeId {
    assert!(!seg_logits.is_empty(), "loss_seg needs at least one scale");
    let mut acc: Option<NodeId> = None;
    for &logits in seg_logits {
        let ce = g.cross_entropy_mean(logits, labels);
        acc = Some(match acc {
            Some(a) => g.add(a, ce),
            None => ce,
        });
    }
    let total = acc.unwrap();
    g.scale(total, 1.0 / seg_logits.len() as f64)
}

/// Combined dual-task objective `w1 * L_quant + w2 * L_seg` with the weights
/// baked in as constants, so dL/dL_quant is exactly w1.
pub fn loss_dual(g: &mut Graph, l_quant: NodeId, l_seg: NodeId, w1: f64, w2: f64) -> NodeId {
    let a = g.scale(l_quant, w1);
    let b = g.scale(l_seg, w2);
    g.add(a, b)
}

/// Dynamic weight averaging between the two task losses.
///
/// After each epoch, feed the epoch-mean losses to [`DwaState::update`]; the
/// state keeps one epoch of history and produces the weights for the next
/// epoch from the descent-rate ratios `r_k = L_k(t-1) / L_k(t-2)`:
///
/// `w_k = c3 * exp(r_k / c4) / sum_j exp(r_j / c4)`
///
/// For the first two epochs both ratios are defined as 1, which yields equal
/// weights c3/2. With the defaults c3 = 1.0, c4 = 2.0 the weights always sum
/// to c3.
#[derive(Debug, Clone, PartialEq)]
pub struct DwaState {
    pub c3: f64,
    pub c4: f64,
    prev: Option<(f64, f64)>,
    weights: (f64, f64),
    updates: usize,
}

impl Default for DwaState {
    fn default() -> Self {
        Self::new(1.0, 2.0)
    }
}

impl DwaState {
    pub fn new(c3: f64, c4: f64) -> Self {
        assert!(c3 > 0.0 && c4 > 0.0, "DWA constants must be positive");
        Self { c3, c4, prev: None, weights: (c3 / 2.0, c3 / 2.0), updates: 0 }
    }

    /// Weights (w1 for the quantification loss, w2 for segmentation) to use
    /// for the upcoming epoch.
    pub fn weights(&self) -> (f64, f64) {
        self.weights
    }

    /// Number of updates applied so far (completed epochs observed).
    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Consumes the just-finished epoch's mean losses and recomputes the
    /// weights for the next epoch. Nonpositive losses have no meaningful
    /// descent ratio and are rejected.
    pub fn update(&mut self, l_quant: f64, l_seg: f64) -> Result<(f64, f64)> {
        if !(l_quant > 0.0 && l_seg > 0.0) || !l_quant.is_finite() || !l_seg.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "DWA needs positive finite losses, got ({}, {})",
                l_quant, l_seg
            )));
        }
        let (r1, r2) = match self.prev {
            // Ratios pin to 1 until two epochs of history exist.
            None => (1.0, 1.0),
            Some((pq, ps)) => (l_quant / pq, l_seg / ps),
        };
        let e1 = (r1 / self.c4).exp();
        let e2 = (r2 / self.c4).exp();
        let w1 = self.c3 * e1 / (e1 + e2);
        let w2 = self.c3 * e2 / (e1 + e2);
        self.prev = Some((l_quant, l_seg));
        self.weights = (w1, w2);
        self.updates += 1;
        Ok(self.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(h: usize, w: usize) -> Tensor {
        let data = (0..h * w)
            .map(|i| if (i / w + i % w) % 2 == 0 { 0.25 } else { 0.75 })
            .collect();
        Tensor::new([h, w], data)
    }

    #[test]
    fn ssim_self_is_one() {
        let x = checkerboard(16, 16);
        let s = ssim(&x, &x, &SsimConfig::default());
        assert!((s - 1.0).abs() < 1e-12, "ssim {}", s);
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = checkerboard(20, 16);
        let mut y = x.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = (*v + (i % 7) as f64 * 0.03).min(1.0);
        }
        let cfg = SsimConfig::default();
        let ab = ssim(&x, &y, &cfg);
        let ba = ssim(&y, &x, &cfg);
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0);
    }

    #[test]
    fn ssim_constant_images_match_direct_formula() {
        // mu1 = 0, mu2 = 1, all variances zero: the index collapses to
        // c1 / (1 + c1) evaluated directly from the definition.
        let a = Tensor::zeros([16, 16]);
        let b = Tensor::full([16, 16], 1.0);
        let cfg = SsimConfig::default();
        let c1 = (cfg.k1 * cfg.range).powi(2);
        let want = c1 / (1.0 + c1);
        let got = ssim(&a, &b, &cfg);
        assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
    }

    #[test]
    fn loss_quant_zero_on_identical_maps() {
        let x = checkerboard(16, 16).reshaped([1, 1, 16, 16]);
        let mut g = Graph::new();
        let a = g.input(x.clone());
        let b = g.input(x);
        let l = loss_quant(&mut g, a, b, &SsimConfig::default());
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn loss_seg_uniform_logits_hit_ln4() {
        let mut g = Graph::new();
        let z1 = g.input(Tensor::zeros([1, 4, 4, 4]));
        let z2 = g.input(Tensor::zeros([1, 4, 4, 4]));
        let labels = vec![2u8; 16];
        let l = loss_seg(&mut g, &[z1, z2], &labels);
        assert!((g.value(l).item() - 4.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_seg_near_zero_for_confident_correct_logits() {
        let mut g = Graph::new();
        let mut z = Tensor::zeros([1, 4, 2, 2]);
        let labels = [0u8, 1, 2, 3];
        for (px, &y) in labels.iter().enumerate() {
            z.data_mut()[y as usize * 4 + px] = 50.0;
        }
        let zn = g.input(z);
        let l = loss_seg(&mut g, &[zn], &labels);
        assert!(g.value(l).item() < 1e-9);
    }

    #[test]
    fn loss_seg_two_pixel_hand_value() {
        // Pixel 0: p(true) = 0.7, pixel 1: p(true) = 0.2 via log-probability
        // logits; loss = -(ln 0.7 + ln 0.2) / 2.
        let mut g = Graph::new();
        let mut z = Tensor::zeros([1, 4, 1, 2]);
        let p0: [f64; 4] = [0.7, 0.1, 0.1, 0.1];
        let p1: [f64; 4] = [0.2, 0.2, 0.2, 0.4];
        for c in 0..4 {
            z.data_mut()[c * 2] = p0[c].ln();
            z.data_mut()[c * 2 + 1] = p1[c].ln();
        }
        let labels = [0u8, 0];
        let zn = g.input(z);
        let l = loss_seg(&mut g, &[zn], &labels);
        let want = -(0.7f64.ln() + 0.2f64.ln()) / 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn dual_loss_gradient_is_the_weight() {
        let mut store = crate::autodiff::optim::ParamStore::new();
        store.insert("lq", Tensor::scalar(0.8)).unwrap();
        store.insert("ls", Tensor::scalar(0.4)).unwrap();
        let mut g = Graph::new();
        let lq = g.param("lq", &store);
        let ls = g.param("ls", &store);
        let l = loss_dual(&mut g, lq, ls, 0.3, 0.7);
        let grads = g.backward(l);
        assert_eq!(grads.get(lq).unwrap().item(), 0.3);
        assert_eq!(grads.get(ls).unwrap().item(), 0.7);
        assert!((g.value(l).item() - (0.3 * 0.8 + 0.7 * 0.4)).abs() < 1e-15);
    }

    #[test]
    fn dwa_equal_ratios_give_exactly_half() {
        let mut dwa = DwaState::default();
        assert_eq!(dwa.weights(), (0.5, 0.5));
        // First update has no history: ratios pin to 1, weights exactly 0.5.
        let (w1, w2) = dwa.update(0.9, 0.5).unwrap();
        assert_eq!(w1, 0.5);
        assert_eq!(w2, 0.5);
        // Equal descent rates keep the split exactly even.
        let (w1, w2) = dwa.update(0.9 * 0.8, 0.5 * 0.8).unwrap();
        assert_eq!(w1, 0.5);
        assert_eq!(w2, 0.5);
    }

    #[test]
    fn dwa_known_ratio_pair() {
        let mut dwa = DwaState::default();
        dwa.update(1.0, 1.0).unwrap();
        // ratios become (1.2, 0.8): w1 = e^0.6 / (e^0.6 + e^0.4)
        let (w1, w2) = dwa.update(1.2, 0.8).unwrap();
        let want = (0.6f64).exp() / ((0.6f64).exp() + (0.4f64).exp());
        assert!((w1 - want).abs() < 1e-12, "{} vs {}", w1, want);
        assert!((w1 - 0.5498).abs() < 1e-4);
        assert!((w1 + w2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dwa_slower_decay_gets_more_weight() {
        let mut dwa = DwaState::default();
        dwa.update(1.0, 1.0).unwrap();
        // quant stalls (ratio 1.0), seg drops fast (ratio 0.5)
        let (w1, w2) = dwa.update(1.0, 0.5).unwrap();
        assert!(w1 > w2, "stalled task should get more weight: {} vs {}", w1, w2);
    }

    #[test]
    fn dwa_rejects_nonpositive_losses() {
        let mut dwa = DwaState::default();
        assert!(dwa.update(0.0, 1.0).is_err());
        assert!(dwa.update(1.0, -0.1).is_err());
    }
}
