//! 17-segment bullseye summary of myocardial maps and its SVG rendering.
//!
//! Slices are grouped into three rings (basal, mid, apical). Each myocardial
//! pixel is binned into an angular sector around the LV centroid, counted
//! counterclockwise from the LV-to-RV direction. Basal and mid rings carry six
//! sectors, the apical ring four; the 17th "segment" is the global mean over
//! every myocardial pixel and is drawn as the center disc.
//!
//! Angles use a y-up convention: with pixel (row, col) and center (cr, cc),
//! the angle is `atan2(cr - row, col - cc)`, so "counterclockwise" matches the
//! usual mathematical orientation when the image is displayed row 0 on top.

use crate::error::{Error, Result};
use crate::relaxometry::T2Map;
use crate::types::SegMap;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fmt::Write as _;

/// Long-axis position of a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ring {
    Basal,
    Mid,
    Apical,
}

impl Ring {
    /// Number of angular sectors in this ring.
    pub fn sectors(self) -> usize {
        match self {
            Ring::Basal | Ring::Mid => 6,
            Ring::Apical => 4,
        }
    }

    /// Index of this ring's first segment within the 16-segment list.
    pub fn segment_offset(self) -> usize {
        match self {
            Ring::Basal => 0,
            Ring::Mid => 6,
            Ring::Apical => 12,
        }
    }
}

/// Per-segment aggregate. `mean` is `None` when no pixel fell into the
/// segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStat {
    pub mean: Option<f64>,
    pub pixels: usize,
}

/// Bullseye summary: 16 segment means plus the global-mean center.
///
/// `segments[0..6]` is the basal ring, `segments[6..12]` the mid ring,
/// `segments[12..16]` the apical ring, each counted counterclockwise from the
/// reference angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BullseyeReport {
    pub rings: Vec<Ring>,
    pub segments: Vec<SegmentStat>,
    /// Mean over all myocardial pixels of all slices (the 17th segment).
    pub center: f64,
    pub center_pixels: usize,
    /// y-up angle of the LV-to-RV centroid vector, radians in (-pi, pi].
    pub reference_angle: f64,
}

/// Pooled centroid (row, col) of one class across several label maps; `None`
/// when the class is absent everywhere.
pub fn pooled_centroid(masks: &[SegMap], class_id: u8) -> Option<(f64, f64)> {
    let mut n = 0usize;
    let mut sr = 0.0;
    let mut sc = 0.0;
    for m in masks {
        for r in 0..m.height {
            for c in 0..m.width {
                if m.get(r, c) == class_id {
                    n += 1;
                    sr += r as f64;
                    sc += c as f64;
                }
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some((sr / n as f64, sc / n as f64))
    }
}

fn wrap_tau(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can return TAU itself when a is a tiny negative number.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Aggregates per-slice maps into the 17-segment bullseye.
///
/// `maps`, `masks`, and `rings` run parallel over slices; myocardial pixels
/// are the `myo_class` entries of each mask. Every ring kind must appear at
/// least once so all 16 segments are defined regions.
pub fn aha_bullseye(
    maps: &[T2Map],
    masks: &[SegMap],
    rings: &[Ring],
    myo_class: u8,
    lv_centroid: (f64, f64),
    rv_centroid: (f64, f64),
) -> Result<BullseyeReport> {
    if maps.len() != masks.len() || maps.len() != rings.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps, {} masks, {} ring labels",
            maps.len(),
            masks.len(),
            rings.len()
        )));
    }
    if maps.is_empty() {
        return Err(Error::InvalidArgument("bullseye needs at least one slice".into()));
    }
    for kind in [Ring::Basal, Ring::Mid, Ring::Apical] {
        if !rings.contains(&kind) {
            return Err(Error::InvalidArgument(format!(
                "ring assignment covers no {kind:?} slice"
            )));
        }
    }
    let dr = lv_centroid.0 - rv_centroid.0;
    let dc = rv_centroid.1 - lv_centroid.1;
    if dr == 0.0 && dc == 0.0 {
        return Err(Error::InvalidArgument(
            "LV and RV centroids coincide, reference angle undefined".into(),
        ));
    }
    let reference_angle = dr.atan2(dc);

    let mut sums = [0.0f64; 16];
    let mut counts = [0usize; 16];
    let mut total = 0.0;
    let mut total_n = 0usize;
    for (i, ((map, mask), &ring)) in maps.iter().zip(masks).zip(rings).enumerate() {
        if map.height != mask.height || map.width != mask.width {
            return Err(Error::ShapeMismatch(format!(
                "slice {i}: map {}x{} vs mask {}x{}",
                map.height, map.width, mask.height, mask.width
            )));
        }
        let nseg = ring.sectors();
        let width = TAU / nseg as f64;
        let mut slice_pixels = 0usize;
        for r in 0..mask.height {
            for c in 0..mask.width {
                if mask.get(r, c) != myo_class {
                    continue;
                }
                slice_pixels += 1;
                let theta = (lv_centroid.0 - r as f64).atan2(c as f64 - lv_centroid.1);
                let rel = wrap_tau(theta - reference_angle);
                // Guard against rel/width rounding up to nseg at the seam.
                let k = ((rel / width) as usize).min(nseg - 1);
                let v = map.get(r, c);
                sums[ring.segment_offset() + k] += v;
                counts[ring.segment_offset() + k] += 1;
                total += v;
                total_n += 1;
            }
        }
        if slice_pixels == 0 {
            return Err(Error::EmptyMask(format!("slice {i} has no myocardial pixels")));
        }
    }
    let segments = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| SegmentStat { mean: (n > 0).then(|| s / n as f64), pixels: n })
        .collect();
    Ok(BullseyeReport {
        rings: rings.to_vec(),
        segments,
        center: total / total_n as f64,
        center_pixels: total_n,
        reference_angle,
    })
}

/// Per-segment residuals between two bullseye reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BullseyeDiff {
    /// a - b per segment; `None` where either side is undefined.
    pub segments: Vec<Option<f64>>,
    pub center: f64,
    pub reference_angle: f64,
}

/// Elementwise `a - b`, center included. The two reports must share the same
/// slice-to-ring assignment.
pub fn bullseye_diff(a: &BullseyeReport, b: &BullseyeReport) -> Result<BullseyeDiff> {
    if a.rings != b.rings {
        return Err(Error::ConfigMismatch(format!(
            "ring structure {:?} vs {:?}",
            a.rings, b.rings
        )));
    }
    let segments = a
        .segments
        .iter()
        .zip(&b.segments)
        .map(|(x, y)| match (x.mean, y.mean) {
            (Some(p), Some(q)) => Some(p - q),
            _ => None,
        })
        .collect();
    Ok(BullseyeDiff {
        segments,
        center: a.center - b.center,
        reference_angle: a.reference_angle,
    })
}

const SVG_SIZE: f64 = 420.0;
const SVG_CX: f64 = 210.0;
const SVG_CY: f64 = 230.0;
const RING_RADII: [f64; 4] = [45.0, 90.0, 135.0, 180.0];

/// Sequential colormap anchors, low to high (deep blue to red).
const SEQ_ANCHORS: [[u8; 3]; 5] =
    [[13, 8, 135], [126, 3, 168], [204, 71, 120], [248, 149, 64], [240, 249, 33]];

/// Diverging colormap anchors for residual maps (blue, white, red).
const DIV_ANCHORS: [[u8; 3]; 5] =
    [[5, 48, 97], [146, 197, 222], [247, 247, 247], [244, 165, 130], [103, 0, 31]];

fn color_at(anchors: &[[u8; 3]; 5], t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t as usize).min(3);
    let f = t - i as f64;
    let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
    let lo = anchors[i];
    let hi = anchors[i + 1];
    format!("#{:02x}{:02x}{:02x}", mix(lo[0], hi[0]), mix(lo[1], hi[1]), mix(lo[2], hi[2]))
}

fn svg_point(r: f64, theta: f64) -> (f64, f64) {
    // SVG y grows downward, map angles are y-up.
    (SVG_CX + r * theta.cos(), SVG_CY - r * theta.sin())
}

fn sector_path(r_in: f64, r_out: f64, a0: f64, a1: f64) -> String {
    let (x0i, y0i) = svg_point(r_in, a0);
    let (x0o, y0o) = svg_point(r_out, a0);
    let (x1o, y1o) = svg_point(r_out, a1);
    let (x1i, y1i) = svg_point(r_in, a1);
    // Counterclockwise (y-up) traversal is sweep 0 in SVG's y-down frame.
    format!(
        "M {x0i:.2} {y0i:.2} L {x0o:.2} {y0o:.2} \
         A {r_out:.2} {r_out:.2} 0 0 0 {x1o:.2} {y1o:.2} \
         L {x1i:.2} {y1i:.2} \
         A {r_in:.2} {r_in:.2} 0 0 1 {x0i:.2} {y0i:.2} Z"
    )
}

struct SvgPalette<'a> {
    anchors: &'a [[u8; 3]; 5],
    lo: f64,
    hi: f64,
}

impl SvgPalette<'_> {
    fn fill(&self, v: Option<f64>) -> String {
        match v {
            Some(x) => color_at(self.anchors, (x - self.lo) / (self.hi - self.lo)),
            None => "#c8c8c8".to_string(),
        }
    }
}

fn label_of(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.1}"),
        None => "n/a".to_string(),
    }
}

fn render_svg(
    title: &str,
    ring_values: &[Option<f64>],
    center: f64,
    reference_angle: f64,
    palette: &SvgPalette,
    legend_label: &str,
) -> String {
    assert_eq!(ring_values.len(), 16, "bullseye wants 16 segment values");
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" \
         viewBox=\"0 0 {0} {1}\">\n",
        SVG_SIZE as u32,
        (SVG_SIZE + 80.0) as u32
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = write!(
        s,
        "<text x=\"{SVG_CX}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{title}</text>\n"
    );
    // Rings from outside in: basal, mid, apical.
    let layout = [(Ring::Basal, 2usize), (Ring::Mid, 1), (Ring::Apical, 0)];
    for (ring, radial) in layout {
        let nseg = ring.sectors();
        let width = TAU / nseg as f64;
        let (r_in, r_out) = (RING_RADII[radial], RING_RADII[radial + 1]);
        for k in 0..nseg {
            let a0 = reference_angle + k as f64 * width;
            let a1 = a0 + width;
            let v = ring_values[ring.segment_offset() + k];
            let _ = write!(
                s,
                "<path d=\"{}\" fill=\"{}\" stroke=\"black\" stroke-width=\"1\"/>\n",
                sector_path(r_in, r_out, a0, a1),
                palette.fill(v)
            );
            let (tx, ty) = svg_point((r_in + r_out) / 2.0, a0 + width / 2.0);
            let _ = write!(
                s,
                "<text x=\"{tx:.2}\" y=\"{ty:.2}\" text-anchor=\"middle\" \
                 dominant-baseline=\"middle\" font-family=\"sans-serif\" \
                 font-size=\"11\">{}</text>\n",
                label_of(v)
            );
        }
    }
    let _ = write!(
        s,
        "<circle cx=\"{SVG_CX}\" cy=\"{SVG_CY}\" r=\"{}\" fill=\"{}\" stroke=\"black\" \
         stroke-width=\"1\"/>\n",
        RING_RADII[0],
        palette.fill(Some(center))
    );
    let _ = write!(
        s,
        "<text x=\"{SVG_CX}\" y=\"{SVG_CY}\" text-anchor=\"middle\" \
         dominant-baseline=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
        label_of(Some(center))
    );
    // Reference-direction tick just outside the basal ring.
    let (mx0, my0) = svg_point(RING_RADII[3], reference_angle);
    let (mx1, my1) = svg_point(RING_RADII[3] + 12.0, reference_angle);
    let _ = write!(
        s,
        "<line x1=\"{mx0:.2}\" y1=\"{my0:.2}\" x2=\"{mx1:.2}\" y2=\"{my1:.2}\" \
         stroke=\"black\" stroke-width=\"2\"/>\n"
    );
    // Horizontal color legend with end labels.
    let (lx, ly, lw, lh) = (60.0, SVG_SIZE + 30.0, SVG_SIZE - 120.0, 14.0);
    let steps = 48;
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let _ = write!(
            s,
            "<rect x=\"{:.2}\" y=\"{ly}\" width=\"{:.2}\" height=\"{lh}\" fill=\"{}\"/>\n",
            lx + t * (lw - lw / steps as f64),
            lw / steps as f64 + 0.5,
            color_at(palette.anchors, t)
        );
    }
    let _ = write!(
        s,
        "<text x=\"{lx}\" y=\"{:.2}\" text-anchor=\"start\" font-family=\"sans-serif\" \
         font-size=\"11\">{:.1}</text>\n",
        ly + lh + 14.0,
        palette.lo
    );
    let _ = write!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" \
         font-size=\"11\">{:.1}</text>\n",
        lx + lw,
        ly + lh + 14.0,
        palette.hi
    );
    let _ = write!(
        s,
        "<text x=\"{SVG_CX}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">{legend_label}</text>\n",
        ly + lh + 14.0
    );
    s.push_str("</svg>\n");
    s
}

/// Renders a bullseye report as a standalone SVG document. `range` sets the
/// linear color scale (low, high) in the map's units.
pub fn render_bullseye_svg(report: &BullseyeReport, range: (f64, f64), title: &str) -> String {
    assert!(range.1 > range.0, "svg color range must be increasing, got {range:?}");
    let palette = SvgPalette { anchors: &SEQ_ANCHORS, lo: range.0, hi: range.1 };
    let values: Vec<Option<f64>> = report.segments.iter().map(|s| s.mean).collect();
    render_svg(title, &values, report.center, report.reference_angle, &palette, "ms")
}

/// Renders a difference bullseye with a diverging scale symmetric about zero;
/// `limit` is the absolute residual mapped to the scale ends.
pub fn render_diff_svg(diff: &BullseyeDiff, limit: f64, title: &str) -> String {
    assert!(limit > 0.0, "svg residual limit must be positive, got {limit}");
    let palette = SvgPalette { anchors: &DIV_ANCHORS, lo: -limit, hi: limit };
    render_svg(title, &diff.segments, diff.center, diff.reference_angle, &palette, "delta ms")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CLASS_MYO;

    fn annulus_mask(n: usize, r_in: f64, r_out: f64) -> SegMap {
        let c = (n as f64 - 1.0) / 2.0;
        let mut data = vec![0u8; n * n];
        for r in 0..n {
            for w in 0..n {
                let d = ((r as f64 - c).powi(2) + (w as f64 - c).powi(2)).sqrt();
                if d >= r_in && d <= r_out {
                    data[r * n + w] = CLASS_MYO;
                }
            }
        }
        SegMap::new(n, n, data).unwrap()
    }

    fn uniform_map(n: usize, v: f64) -> T2Map {
        T2Map::new(n, n, vec![v; n * n], vec![true; n * n]).unwrap()
    }

    fn three_rings() -> Vec<Ring> {
        vec![Ring::Basal, Ring::Mid, Ring::Apical]
    }

    #[test]
    fn uniform_map_fills_every_segment_with_the_global_mean() {
        let n = 64;
        let mask = annulus_mask(n, 8.0, 14.0);
        let maps = vec![uniform_map(n, 45.0); 3];
        let masks = vec![mask; 3];
        let rep = aha_bullseye(&maps, &masks, &three_rings(), CLASS_MYO, (31.5, 31.5), (31.5, 10.0))
            .unwrap();
        assert_eq!(rep.center, 45.0);
        assert_eq!(rep.segments.len(), 16);
        for seg in &rep.segments {
            assert_eq!(seg.mean, Some(45.0));
            assert!(seg.pixels > 0);
        }
    }

    #[test]
    fn segment_pixel_counts_partition_the_mask() {
        let n = 64;
        let mask = annulus_mask(n, 8.0, 14.0);
        let per_slice = mask.class_mask(CLASS_MYO).iter().filter(|&&b| b).count();
        let maps = vec![uniform_map(n, 45.0); 3];
        let masks = vec![mask; 3];
        let rep = aha_bullseye(&maps, &masks, &three_rings(), CLASS_MYO, (31.5, 31.5), (31.5, 10.0))
            .unwrap();
        let basal: usize = rep.segments[0..6].iter().map(|s| s.pixels).sum();
        let mid: usize = rep.segments[6..12].iter().map(|s| s.pixels).sum();
        let apical: usize = rep.segments[12..16].iter().map(|s| s.pixels).sum();
        assert_eq!(basal, per_slice);
        assert_eq!(mid, per_slice);
        assert_eq!(apical, per_slice);
        assert_eq!(rep.center_pixels, 3 * per_slice);
    }

    #[test]
    fn elevated_wedge_raises_exactly_one_segment_per_ring() {
        let n = 64;
        let center = (n as f64 - 1.0) / 2.0;
        let mask = annulus_mask(n, 8.0, 14.0);
        // Reference points left; elevate the 60-degree wedge starting there.
        let rv = (center, 10.0);
        let ref_angle = (center - rv.0).atan2(rv.1 - center);
        let mut vals = vec![45.0; n * n];
        for r in 0..n {
            for w in 0..n {
                let theta = (center - r as f64).atan2(w as f64 - center);
                let rel = (theta - ref_angle).rem_euclid(TAU);
                if rel < TAU / 6.0 {
                    vals[r * n + w] = 70.0;
                }
            }
        }
        let map = T2Map::new(n, n, vals, vec![true; n * n]).unwrap();
        let rep = aha_bullseye(
            &[map.clone(), map.clone(), map],
            &[mask.clone(), mask.clone(), mask],
            &three_rings(),
            CLASS_MYO,
            (center, center),
            rv,
        )
        .unwrap();
        // Basal and mid: segment 0 of the ring is exactly 70, the rest 45.
        for offset in [0usize, 6] {
            let ring = &rep.segments[offset..offset + 6];
            assert_eq!(ring[0].mean, Some(70.0));
            for seg in &ring[1..] {
                assert_eq!(seg.mean, Some(45.0));
            }
        }
        // Apical sectors are 90 degrees; only the first contains the wedge.
        let apical = &rep.segments[12..16];
        assert!(apical[0].mean.unwrap() > 45.0);
        for seg in &apical[1..] {
            assert_eq!(seg.mean, Some(45.0));
        }
    }

    #[test]
    fn rotating_image_and_centroids_preserves_segment_means() {
        let n = 64;
        let center = (n as f64 - 1.0) / 2.0;
        let rv = (center, center + 10.0);
        let ref_angle: f64 = 0.0;
        // Values keyed to the sector index; pixels near boundaries dropped so
        // resampling cannot flip bins.
        let mut vals = vec![0.0; n * n];
        let mut lab = vec![0u8; n * n];
        let width = TAU / 6.0;
        for r in 0..n {
            for w in 0..n {
                let d = ((r as f64 - center).powi(2) + (w as f64 - center).powi(2)).sqrt();
                if !(8.0..=14.0).contains(&d) {
                    continue;
                }
                let theta = (center - r as f64).atan2(w as f64 - center);
                let rel = (theta - ref_angle).rem_euclid(TAU);
                let frac = (rel / width).fract();
                if frac < 1e-3 || frac > 1.0 - 1e-3 {
                    continue;
                }
                lab[r * n + w] = CLASS_MYO;
                vals[r * n + w] = 40.0 + 5.0 * (rel / width).floor();
            }
        }
        let mask = SegMap::new(n, n, lab.clone()).unwrap();
        let map = T2Map::new(n, n, vals.clone(), vec![true; n * n]).unwrap();
        let rep = aha_bullseye(
            &[map.clone(), map.clone(), map],
            &[mask.clone(), mask.clone(), mask],
            &three_rings(),
            CLASS_MYO,
            (center, center),
            rv,
        )
        .unwrap();
        // Rotate 90 degrees counterclockwise: (r, c) -> (n-1-c, r).
        let mut vals_r = vec![0.0; n * n];
        let mut lab_r = vec![0u8; n * n];
        for r in 0..n {
            for c in 0..n {
                vals_r[(n - 1 - c) * n + r] = vals[r * n + c];
                lab_r[(n - 1 - c) * n + r] = lab[r * n + c];
            }
        }
        let mask_r = SegMap::new(n, n, lab_r).unwrap();
        let map_r = T2Map::new(n, n, vals_r, vec![true; n * n]).unwrap();
        let rv_r = (n as f64 - 1.0 - rv.1, rv.0);
        let rep_r = aha_bullseye(
            &[map_r.clone(), map_r.clone(), map_r],
            &[mask_r.clone(), mask_r.clone(), mask_r],
            &three_rings(),
            CLASS_MYO,
            (center, center),
            rv_r,
        )
        .unwrap();
        for (a, b) in rep.segments.iter().zip(&rep_r.segments) {
            assert_eq!(a.pixels, b.pixels);
            let (x, y) = (a.mean.unwrap(), b.mean.unwrap());
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn empty_slice_mask_is_an_error() {
        let n = 16;
        let maps = vec![uniform_map(n, 45.0); 3];
        let masks = vec![
            annulus_mask(n, 2.0, 5.0),
            SegMap::zeros(n, n),
            annulus_mask(n, 2.0, 5.0),
        ];
        let err = aha_bullseye(&maps, &masks, &three_rings(), CLASS_MYO, (7.5, 7.5), (7.5, 1.0));
        assert!(matches!(err, Err(Error::EmptyMask(_))));
    }

    #[test]
    fn coincident_centroids_are_an_error() {
        let n = 16;
        let maps = vec![uniform_map(n, 45.0); 3];
        let masks = vec![annulus_mask(n, 2.0, 5.0); 3];
        let err = aha_bullseye(&maps, &masks, &three_rings(), CLASS_MYO, (7.5, 7.5), (7.5, 7.5));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn diff_of_identical_reports_is_zero_and_antisymmetric() {
        let n = 32;
        let mask = annulus_mask(n, 4.0, 8.0);
        let rings = three_rings();
        let c = (n as f64 - 1.0) / 2.0;
        let a = aha_bullseye(
            &[uniform_map(n, 50.0), uniform_map(n, 50.0), uniform_map(n, 50.0)],
            &[mask.clone(), mask.clone(), mask.clone()],
            &rings,
            CLASS_MYO,
            (c, c),
            (c, 2.0),
        )
        .unwrap();
        let b = aha_bullseye(
            &[uniform_map(n, 47.0), uniform_map(n, 47.0), uniform_map(n, 47.0)],
            &[mask.clone(), mask.clone(), mask],
            &rings,
            CLASS_MYO,
            (c, c),
            (c, 2.0),
        )
        .unwrap();
        let zero = bullseye_diff(&a, &a).unwrap();
        assert!(zero.segments.iter().all(|s| s == &Some(0.0)));
        assert_eq!(zero.center, 0.0);
        let ab = bullseye_diff(&a, &b).unwrap();
        let ba = bullseye_diff(&b, &a).unwrap();
        assert_eq!(ab.center, a.center - b.center);
        for (x, y) in ab.segments.iter().zip(&ba.segments) {
            assert_eq!(x.unwrap(), -y.unwrap());
        }
    }

    #[test]
    fn diff_requires_matching_ring_structure() {
        let n = 32;
        let mask = annulus_mask(n, 4.0, 8.0);
        let c = (n as f64 - 1.0) / 2.0;
        let mk = |rings: Vec<Ring>| {
            aha_bullseye(
                &vec![uniform_map(n, 50.0); rings.len()],
                &vec![mask.clone(); rings.len()],
                &rings,
                CLASS_MYO,
                (c, c),
                (c, 2.0),
            )
            .unwrap()
        };
        let a = mk(three_rings());
        let b = mk(vec![Ring::Basal, Ring::Basal, Ring::Mid, Ring::Apical]);
        assert!(matches!(bullseye_diff(&a, &b), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn pooled_centroid_of_symmetric_disc_is_the_disc_center() {
        let n = 33;
        let c = 16.0;
        let mut data = vec![0u8; n * n];
        for r in 0..n {
            for w in 0..n {
                if (r as f64 - c).powi(2) + (w as f64 - c).powi(2) <= 36.0 {
                    data[r * n + w] = 1;
                }
            }
        }
        let m = SegMap::new(n, n, data).unwrap();
        let (cr, cc) = pooled_centroid(&[m], 1).unwrap();
        assert_eq!(cr, 16.0);
        assert_eq!(cc, 16.0);
        assert!(pooled_centroid(&[SegMap::zeros(4, 4)], 1).is_none());
    }

    #[test]
    fn svg_contains_all_sectors_labels_and_legend() {
        let n = 32;
        let mask = annulus_mask(n, 4.0, 8.0);
        let c = (n as f64 - 1.0) / 2.0;
        let rep = aha_bullseye(
            &[uniform_map(n, 45.0), uniform_map(n, 45.0), uniform_map(n, 45.0)],
            &[mask.clone(), mask.clone(), mask],
            &three_rings(),
            CLASS_MYO,
            (c, c),
            (c, 2.0),
        )
        .unwrap();
        let svg = render_bullseye_svg(&rep, (0.0, 100.0), "phantom");
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<path").count(), 16);
        assert_eq!(svg.matches(">45.0</text>").count(), 17);
        assert!(svg.contains("phantom"));
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN"));
        let diff = bullseye_diff(&rep, &rep).unwrap();
        let dsvg = render_diff_svg(&diff, 10.0, "residual");
        assert_eq!(dsvg.matches("<path").count(), 16);
        assert!(dsvg.contains("residual"));
    }

    #[test]
    fn colormap_hits_its_anchor_points() {
        assert_eq!(color_at(&SEQ_ANCHORS, 0.0), "#0d0887");
        assert_eq!(color_at(&SEQ_ANCHORS, 1.0), "#f0f921");
        assert_eq!(color_at(&DIV_ANCHORS, 0.5), "#f7f7f7");
        // Out-of-range values clamp to the scale ends.
        assert_eq!(color_at(&SEQ_ANCHORS, -3.0), color_at(&SEQ_ANCHORS, 0.0));
        assert_eq!(color_at(&SEQ_ANCHORS, 7.0), color_at(&SEQ_ANCHORS, 1.0));
    }
}
