//! Agreement metrics between predicted and reference maps: Dice overlap,
//! Pearson correlation, Bland-Altman limits of agreement, and the 17-segment
//! bullseye summary (see [`bullseye`]).

pub mod bullseye;

pub use bullseye::{
    aha_bullseye, bullseye_diff, pooled_centroid, render_bullseye_svg, render_diff_svg,
    BullseyeDiff, BullseyeReport, Ring, SegmentStat,
};

use crate::error::{Error, Result};
use crate::types::SegMap;
use serde::{Deserialize, Serialize};

/// Dice overlap of one class between two label maps. Two empty masks count as
/// perfect agreement (1.0).
pub fn dice(a: &SegMap, b: &SegMap, class_id: u8) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "label maps {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut inter = 0usize;
    let mut size_a = 0usize;
    let mut size_b = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let ia = x == class_id;
        let ib = y == class_id;
        size_a += ia as usize;
        size_b += ib as usize;
        inter += (ia && ib) as usize;
    }
    if size_a + size_b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (size_a + size_b) as f64)
}

/// Sample Pearson correlation coefficient. Errors when either input has zero
/// variance (the coefficient is undefined there) or fewer than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Bland-Altman agreement analysis between two paired measurement series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    /// Mean difference m1 - m2.
    pub bias: f64,
    /// Sample standard deviation (n-1) of the differences.
    pub sd: f64,
    /// bias + 1.96 * sd
    pub upper: f64,
    /// bias - 1.96 * sd
    pub lower: f64,
    /// Fraction of differences inside [lower, upper] (inclusive).
    pub coverage: f64,
    /// (mean, difference) per pair, plotting-ready.
    pub points: Vec<(f64, f64)>,
}

/// Computes bias, n-1 standard deviation, and the 1.96-sigma limits of
/// agreement of `m1 - m2`.
pub fn bland_altman(m1: &[f64], m2: &[f64]) -> Result<BaReport> {
    if m1.len() != m2.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", m1.len(), m2.len())));
    }
    if m1.len() < 2 {
        return Err(Error::InvalidArgument("bland_altman needs at least 2 pairs".into()));
    }
    let n = m1.len();
    let points: Vec<(f64, f64)> =
        m1.iter().zip(m2).map(|(&a, &b)| ((a + b) / 2.0, a - b)).collect();
    let bias = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let ss = points.iter().map(|p| (p.1 - bias) * (p.1 - bias)).sum::<f64>();
    let sd = (ss / (n - 1) as f64).sqrt();
    let upper = bias + 1.96 * sd;
    let lower = bias - 1.96 * sd;
    let inside = points.iter().filter(|p| p.1 >= lower && p.1 <= upper).count();
    Ok(BaReport { bias, sd, upper, lower, coverage: inside as f64 / n as f64, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_of(h: usize, w: usize, data: &[u8]) -> SegMap {
        SegMap::new(h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn dice_identical_masks() {
        let m = map_of(2, 2, &[0, 1, 1, 0]);
        assert_eq!(dice(&m, &m, 1).unwrap(), 1.0);
    }

    #[test]
    fn dice_disjoint_masks() {
        let a = map_of(2, 2, &[1, 1, 0, 0]);
        let b = map_of(2, 2, &[0, 0, 1, 1]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_half_overlap() {
        // |A| = 2, |B| = 2, |A ∩ B| = 1 -> 2*1/4 = 0.5
        let a = map_of(2, 2, &[1, 1, 0, 0]);
        let b = map_of(2, 2, &[1, 0, 1, 0]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_empty_class_counts_as_agreement() {
        let a = map_of(2, 2, &[0, 0, 0, 0]);
        let b = map_of(2, 2, &[0, 0, 0, 0]);
        assert_eq!(dice(&a, &b, 3).unwrap(), 1.0);
    }

    #[test]
    fn dice_is_symmetric() {
        let a = map_of(2, 3, &[1, 2, 1, 0, 1, 2]);
        let b = map_of(2, 3, &[1, 1, 2, 0, 1, 0]);
        for class in 0..4u8 {
            assert_eq!(dice(&a, &b, class).unwrap(), dice(&b, &a, class).unwrap());
        }
    }

    #[test]
    fn pearson_perfect_line() {
        let x = [1.0, 2.0, 3.0];
        let y = [2.0, 4.0, 6.0];
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_anti_correlation() {
        let x = [1.0, 2.0, 3.0];
        let y = [3.0, 2.0, 1.0];
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_hand_value() {
        // r = 9 / sqrt(84)
        let x = [1.0, 2.0, 3.0];
        let y = [1.0, 2.0, 4.0];
        let want = 9.0 / 84.0f64.sqrt();
        assert!((pearson(&x, &y).unwrap() - want).abs() < 1e-12);
        assert!((pearson(&x, &y).unwrap() - 0.9820).abs() < 1e-4);
    }

    #[test]
    fn pearson_zero_variance_is_an_error() {
        let x = [2.0, 2.0, 2.0];
        let y = [1.0, 2.0, 3.0];
        assert!(matches!(pearson(&x, &y), Err(Error::ZeroVariance)));
    }

    #[test]
    fn bland_altman_identical_series() {
        let m = [40.0, 50.0, 60.0];
        let r = bland_altman(&m, &m).unwrap();
        assert_eq!(r.bias, 0.0);
        assert_eq!(r.sd, 0.0);
        assert_eq!(r.coverage, 1.0);
    }

    #[test]
    fn bland_altman_hand_example() {
        // differences {1, 2, 3}: bias 2, sd 1, limits [0.04, 3.96]
        let m1 = [2.0, 4.0, 6.0];
        let m2 = [1.0, 2.0, 3.0];
        let r = bland_altman(&m1, &m2).unwrap();
        assert!((r.bias - 2.0).abs() < 1e-12);
        assert!((r.sd - 1.0).abs() < 1e-12);
        assert!((r.upper - 3.96).abs() < 1e-12);
        assert!((r.lower - 0.04).abs() < 1e-12);
        assert_eq!(r.coverage, 1.0);
    }

    #[test]
    fn bland_altman_limits_reconstruct_exactly() {
        let m1 = [3.0, 7.0, 1.0, 9.0, 4.0];
        let m2 = [2.5, 7.5, 2.0, 8.0, 4.5];
        let r = bland_altman(&m1, &m2).unwrap();
        assert_eq!(r.upper, r.bias + 1.96 * r.sd);
        assert_eq!(r.lower, r.bias - 1.96 * r.sd);
        assert!((r.upper - r.lower) - 2.0 * 1.96 * r.sd < 1e-9);
    }
}
