//! Per-pixel mono-exponential T2 fitting of multi-echo volumes.
//!
//! The signal model is `s(te) = s0 * exp(-te / t2)`. Each pixel is fit by
//! nonlinear least squares over `t2`; in the default mode `s0` is profiled
//! out in closed form, so the search is one-dimensional. A coarse grid scan
//! followed by golden-section refinement makes no convexity assumption: the
//! scan localizes the global minimum to one grid cell and refinement only
//! sharpens it.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Multi-echo image stack: `slices` slices, one image per echo time.
/// Voxels are nonnegative reals indexed `((s * C + c) * H + h) * W + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiEchoVolume {
    echoes_ms: Vec<f64>,
    slices: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MultiEchoVolume {
    pub fn new(
        echoes_ms: Vec<f64>,
        slices: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if echoes_ms.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 echo times, got {}",
                echoes_ms.len()
            )));
        }
        if !echoes_ms.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(format!(
                "echo times must be strictly increasing: {:?}",
                echoes_ms
            )));
        }
        if echoes_ms.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "echo times must be finite and nonnegative: {:?}",
                echoes_ms
            )));
        }
        let want = slices * echoes_ms.len() * height * width;
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "volume {}x{}x{}x{} wants {} voxels, got {}",
                slices,
                echoes_ms.len(),
                height,
                width,
                want,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel value {}", bad)));
        }
        if data.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("voxel values must be nonnegative".into()));
        }
        Ok(Self { echoes_ms, slices, height, width, data })
    }

    pub fn echoes_ms(&self) -> &[f64] {
        &self.echoes_ms
    }

    pub fn num_echoes(&self) -> usize {
        self.echoes_ms.len()
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, s: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[((s * self.echoes_ms.len() + c) * self.height + h) * self.width + w]
    }

    /// Per-echo image of one slice as a borrowed plane.
    pub fn plane(&self, s: usize, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        let base = (s * self.echoes_ms.len() + c) * hw;
        &self.data[base..base + hw]
    }
}

/// T2 map for one slice, values in milliseconds plus a per-pixel validity
/// flag. After window truncation every valid value lies in the window.
#[derive(Debug, Clone, PartialEq)]
pub struct T2Map {
    pub height: usize,
    pub width: usize,
    pub values_ms: Vec<f64>,
    pub valid: Vec<bool>,
}

impl T2Map {
    pub fn new(height: usize, width: usize, values_ms: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values_ms.len() != height * width || valid.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "t2 map {}x{} wants {} entries, got {} values / {} flags",
                height,
                width,
                height * width,
                values_ms.len(),
                valid.len()
            )));
        }
        Ok(Self { height, width, values_ms, valid })
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values_ms[h * self.width + w]
    }

    /// Mean value over a boolean mask; `None` when the mask is empty.
    pub fn mean_over(&self, mask: &[bool]) -> Option<f64> {
        assert_eq!(mask.len(), self.values_ms.len(), "mask length");
        let mut n = 0usize;
        let mut s = 0.0;
        for (&v, &m) in self.values_ms.iter().zip(mask) {
            if m {
                s += v;
                n += 1;
            }
        }
        if n == 0 {
            None
        } else {
            Some(s / n as f64)
        }
    }
}

/// How `s0` is treated during the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// `s0` profiled out in closed form at every candidate `t2`.
    JointS0,
    /// `s0` pinned to the first-echo sample (sensible when te[0] == 0).
    FixedS0FirstEcho,
}

/// Solver settings for the 1-D search over `t2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub mode: FitMode,
    /// Inclusive search interval in milliseconds.
    pub t2_bounds: (f64, f64),
    /// Coarse scan step in milliseconds.
    pub coarse_step_ms: f64,
    /// Golden-section interval tolerance in milliseconds.
    pub refine_tol_ms: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mode: FitMode::JointS0,
            t2_bounds: (1.0, 200.0),
            coarse_step_ms: 1.0,
            refine_tol_ms: 1e-3,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.t2_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
            return Err(Error::InvalidArgument(format!("bad t2 bounds ({}, {})", lo, hi)));
        }
        if !(self.coarse_step_ms > 0.0 && self.refine_tol_ms > 0.0) {
            return Err(Error::InvalidArgument("step and tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Result of fitting one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFit {
    pub t2_ms: f64,
    pub s0: f64,
    /// Sum of squared residuals at the solution.
    pub residual: f64,
    /// False for degenerate pixels (all-zero signal) and boundary-clamped
    /// solutions.
    pub valid: bool,
}

/// Sum of squared residuals of the model at a fixed `t2`, together with the
/// `s0` used. In `JointS0` mode the optimal s0 for this t2 is
/// `sum(s_c * e_c) / sum(e_c^2)` with `e_c = exp(-te_c / t2)`.
pub fn residual_at(signal: &[f64], echoes_ms: &[f64], mode: FitMode, t2_ms: f64) -> (f64, f64) {
    debug_assert_eq!(signal.len(), echoes_ms.len());
    let s0 = match mode {
        FitMode::JointS0 => {
            let mut num = 0.0;
            let mut den = 0.0;
            for (&s, &te) in signal.iter().zip(echoes_ms) {
                let e = (-te / t2_ms).exp();
                num += s * e;
                den += e * e;
            }
            num / den
        }
        FitMode::FixedS0FirstEcho => signal[0],
    };
    let mut r = 0.0;
    for (&s, &te) in signal.iter().zip(echoes_ms) {
        let d = s0 * (-te / t2_ms).exp() - s;
        r += d * d;
    }
    (s0, r)
}

fn check_signal(signal: &[f64], echoes_ms: &[f64]) -> Result<()> {
    if signal.len() != echoes_ms.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} samples for {} echo times",
            signal.len(),
            echoes_ms.len()
        )));
    }
    if let Some(bad) = signal.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("signal sample {}", bad)));
    }
    if signal.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("signal samples must be nonnegative".into()));
    }
    Ok(())
}

/// Fits the decay model to one pixel.
///
/// An all-zero signal short-circuits to `t2 = 0, s0 = 0, valid = false`.
/// Solutions pinned against either search bound are flagged invalid; their
/// value is still the constrained minimizer (monotonically increasing signals
/// clamp to the upper bound this way).
pub fn fit_t2_pixel(signal: &[f64], echoes_ms: &[f64], cfg: &FitConfig) -> Result<PixelFit> {
    check_signal(signal, echoes_ms)?;
    cfg.validate()?;
    if signal.iter().all(|&v| v == 0.0) {
        return Ok(PixelFit { t2_ms: 0.0, s0: 0.0, residual: 0.0, valid: false });
    }
    let (lo, hi) = cfg.t2_bounds;

    // Coarse scan, inclusive of both bounds. First minimum wins ties so the
    // result never depends on traversal internals.
    let mut best_t = lo;
    let mut best_r = residual_at(signal, echoes_ms, cfg.mode, lo).1;
    let mut t = lo + cfg.coarse_step_ms;
    while t < hi {
        let r = residual_at(signal, echoes_ms, cfg.mode, t).1;
        if r < best_r {
            best_r = r;
            best_t = t;
        }
        t += cfg.coarse_step_ms;
    }
    let r_hi = residual_at(signal, echoes_ms, cfg.mode, hi).1;
    if r_hi < best_r {
        best_t = hi;
    }

    // Golden-section refinement inside the bracketing cell.
    let mut a = (best_t - cfg.coarse_step_ms).max(lo);
    let mut b = (best_t + cfg.coarse_step_ms).min(hi);
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = residual_at(signal, echoes_ms, cfg.mode, c).1;
    let mut fd = residual_at(signal, echoes_ms, cfg.mode, d).1;
    while b - a > cfg.refine_tol_ms {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = residual_at(signal, echoes_ms, cfg.mode, c).1;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = residual_at(signal, echoes_ms, cfg.mode, d).1;
        }
    }
    let t2 = 0.5 * (a + b);
    let (s0, residual) = residual_at(signal, echoes_ms, cfg.mode, t2);
    let margin = 2.0 * cfg.refine_tol_ms;
    let valid = t2 > lo + margin && t2 < hi - margin;
    Ok(PixelFit { t2_ms: t2, s0, residual, valid })
}

/// Exhaustive reference solver: evaluates the objective on the half-open grid
/// `lo + k*step, k = 0 .. round((hi-lo)/step) - 1` and returns the first
/// minimizing grid point. Slow on purpose; exists to cross-check the solver.
pub fn oracle_grid_fit(
    signal: &[f64],
    echoes_ms: &[f64],
    mode: FitMode,
    bounds: (f64, f64),
    step_ms: f64,
) -> Result<f64> {
    check_signal(signal, echoes_ms)?;
    let (lo, hi) = bounds;
    if !(lo > 0.0 && hi > lo && step_ms > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bad oracle grid ({}, {}) step {}",
            lo, hi, step_ms
        )));
    }
    let n = ((hi - lo) / step_ms).round() as usize;
    let mut best_t = lo;
    let mut best_r = f64::INFINITY;
    for k in 0..n {
        let t = lo + k as f64 * step_ms;
        let r = residual_at(signal, echoes_ms, mode, t).1;
        if r < best_r {
            best_r = r;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Number of candidates the oracle grid evaluates; exposed so tests can pin it.
pub fn oracle_grid_len(bounds: (f64, f64), step_ms: f64) -> usize {
    ((bounds.1 - bounds.0) / step_ms).round() as usize
}

/// Fits every pixel of one slice. Pixel failures (degenerate signals) land in
/// the validity mask instead of aborting the map. The window [0, 200] ms is
/// applied afterwards. Rows are processed in parallel; the per-pixel
/// arithmetic is independent of the partitioning, so results are identical
/// for any thread count.
pub fn fit_t2_map(v: &MultiEchoVolume, slice: usize, cfg: &FitConfig) -> Result<T2Map> {
    if slice >= v.slices {
        return Err(Error::InvalidArgument(format!(
            "slice {} out of range 0..{}",
            slice, v.slices
        )));
    }
    cfg.validate()?;
    let (h, w, c) = (v.height, v.width, v.num_echoes());
    let mut values = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    values
        .par_chunks_mut(w)
        .zip(valid.par_chunks_mut(w))
        .enumerate()
        .for_each(|(row, (vrow, frow))| {
            let mut sig = vec![0.0; c];
            for col in 0..w {
                for ci in 0..c {
                    sig[ci] = v.get(slice, ci, row, col);
                }
                match fit_t2_pixel(&sig, &v.echoes_ms, cfg) {
                    Ok(fit) => {
                        vrow[col] = fit.t2_ms;
                        frow[col] = fit.valid;
                    }
                    Err(_) => {
                        vrow[col] = 0.0;
                        frow[col] = false;
                    }
                }
            }
        });
    let map = T2Map::new(h, w, values, valid)?;
    Ok(truncate_window(map, 0.0, 200.0))
}

/// Clamps map values into `[lo_ms, hi_ms]`. Validity flags are untouched.
pub fn truncate_window(mut map: T2Map, lo_ms: f64, hi_ms: f64) -> T2Map {
    assert!(lo_ms <= hi_ms, "window [{}, {}] is empty", lo_ms, hi_ms);
    for v in &mut map.values_ms {
        *v = v.clamp(lo_ms, hi_ms);
    }
    map
}

/// Joint min-max normalization over every echo and slice of the volume:
/// the global minimum maps to 0 and the global maximum to 1, preserving
/// intensity relations between echoes. A constant volume is an error.
pub fn normalize_minmax(v: &MultiEchoVolume) -> Result<MultiEchoVolume> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &x in &v.data {
        min = min.min(x);
        max = max.max(x);
    }
    if min == max {
        return Err(Error::ConstantVolume);
    }
    let range = max - min;
    let data = v.data.iter().map(|&x| (x - min) / range).collect();
    MultiEchoVolume::new(v.echoes_ms.clone(), v.slices, v.height, v.width, data)
}

/// Center crop to a square window of `side` pixels. When the margin is odd the
/// retained window sits half a pixel toward the top/left: the offset is
/// `floor((len - side) / 2)`, so a 227 -> 160 crop keeps rows 33..=192.
pub fn center_crop(v: &MultiEchoVolume, side: usize) -> Result<MultiEchoVolume> {
    if side == 0 || side > v.height || side > v.width {
        return Err(Error::InvalidArgument(format!(
            "crop side {} for a {}x{} volume",
            side, v.height, v.width
        )));
    }
    let top = (v.height - side) / 2;
    let left = (v.width - side) / 2;
    let c = v.num_echoes();
    let mut data = Vec::with_capacity(v.slices * c * side * side);
    for s in 0..v.slices {
        for ci in 0..c {
            let plane = v.plane(s, ci);
            for h in 0..side {
                let base = (top + h) * v.width + left;
                data.extend_from_slice(&plane[base..base + side]);
            }
        }
    }
    MultiEchoVolume::new(v.echoes_ms.clone(), v.slices, side, side, data)
}
