//! Synthetic cardiac phantoms with exact ground truth.
//!
//! A phantom is three concentric structures on a square grid: an LV blood
//! disc, a myocardial annulus around it, and an RV blood crescent to one
//! side. Every pixel carries a region label, a true T2, and a proton density
//! s0; the multi-echo volume is the exact decay model `s0 * exp(-te / t2)`
//! evaluated at the requested echo times, so a noiseless fit must recover the
//! generator inputs. Noise and the eight-variant augmentation set are seeded
//! and reproducible.

use crate::error::{Error, Result};
use crate::relaxometry::{MultiEchoVolume, T2Map};
use crate::seed_mix;
use crate::types::{SegMap, CLASS_LV, CLASS_MYO, CLASS_RV};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;

/// Angular wedge of elevated T2 inside the myocardium, modeling edema.
/// Angles are y-up radians about the phantom center; the wedge covers
/// relative angles in the half-open span `[start_rad, start_rad + span_rad)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdemaWedge {
    pub start_rad: f64,
    pub span_rad: f64,
    pub delta_t2_ms: f64,
}

/// Generator inputs for one phantom slice. Regions are assigned by
/// precedence (myocardium, then LV, then RV), so they are disjoint for any
/// geometry that passes validation.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub side: usize,
    /// LV blood disc radius, pixels.
    pub lv_radius: f64,
    /// Myocardial annulus (inner, outer) radii, pixels.
    pub myo_radii: (f64, f64),
    /// Leftward offset of the RV disc center from the phantom center.
    pub rv_offset: f64,
    pub rv_radius: f64,
    pub t2_lv_ms: f64,
    pub t2_myo_ms: f64,
    pub t2_rv_ms: f64,
    pub s0_lv: f64,
    pub s0_myo: f64,
    pub s0_rv: f64,
    pub edema: Option<EdemaWedge>,
    pub echoes_ms: Vec<f64>,
    pub seed: u64,
}

impl PhantomSpec {
    /// Canonical mid-ventricular geometry on a 64-pixel grid.
    pub fn base(seed: u64) -> Self {
        Self {
            side: 64,
            lv_radius: 8.0,
            myo_radii: (8.0, 13.0),
            rv_offset: 16.0,
            rv_radius: 9.0,
            t2_lv_ms: 180.0,
            t2_myo_ms: 45.0,
            t2_rv_ms: 180.0,
            s0_lv: 0.95,
            s0_myo: 0.8,
            s0_rv: 0.95,
            edema: None,
            echoes_ms: vec![0.0, 35.0, 55.0],
            seed,
        }
    }

    /// Randomized geometry and tissue values for dataset generation. Half of
    /// the draws carry an edema wedge. Deterministic per seed.
    pub fn randomized(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(seed, 0x70b5));
        let inner = rng.gen_range(6.5..9.0);
        let outer = inner + rng.gen_range(3.5..5.5);
        let edema = if rng.gen_bool(0.5) {
            Some(EdemaWedge {
                start_rad: rng.gen_range(0.0..TAU),
                span_rad: rng.gen_range(TAU / 12.0..TAU / 4.0),
                delta_t2_ms: rng.gen_range(15.0..30.0),
            })
        } else {
            None
        };
        Self {
            lv_radius: inner,
            myo_radii: (inner, outer),
            rv_offset: outer + rng.gen_range(2.0..4.0),
            rv_radius: rng.gen_range(7.0..10.0),
            t2_lv_ms: rng.gen_range(160.0..195.0),
            t2_myo_ms: rng.gen_range(40.0..50.0),
            t2_rv_ms: rng.gen_range(160.0..195.0),
            s0_lv: rng.gen_range(0.85..1.0),
            s0_myo: rng.gen_range(0.7..0.9),
            s0_rv: rng.gen_range(0.85..1.0),
            edema,
            ..Self::base(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        let (inner, outer) = self.myo_radii;
        if !(outer > inner && inner > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "myocardial annulus wants outer > inner > 0, got ({inner}, {outer})"
            )));
        }
        if self.lv_radius <= 0.0 || self.lv_radius > inner {
            return Err(Error::InvalidArgument(format!(
                "LV radius {} must lie in (0, {inner}]",
                self.lv_radius
            )));
        }
        if self.rv_radius <= 0.0 || self.rv_offset <= 0.0 {
            return Err(Error::InvalidArgument(
                "RV crescent wants positive offset and radius".into(),
            ));
        }
        if self.side < 8 {
            return Err(Error::InvalidArgument(format!("side {} too small", self.side)));
        }
        for (name, t2) in
            [("LV", self.t2_lv_ms), ("MYO", self.t2_myo_ms), ("RV", self.t2_rv_ms)]
        {
            if !(t2 > 0.0 && t2 <= 200.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} T2 {t2} outside (0, 200] ms"
                )));
            }
        }
        for (name, s0) in [("LV", self.s0_lv), ("MYO", self.s0_myo), ("RV", self.s0_rv)] {
            if !(s0 > 0.0 && s0 <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} s0 {s0} outside (0, 1]"
                )));
            }
        }
        if let Some(w) = &self.edema {
            if !(w.span_rad > 0.0 && w.span_rad < TAU) {
                return Err(Error::InvalidArgument(format!(
                    "edema span {} outside (0, tau)",
                    w.span_rad
                )));
            }
            if self.t2_myo_ms + w.delta_t2_ms <= 0.0
                || self.t2_myo_ms + w.delta_t2_ms > 200.0
            {
                return Err(Error::InvalidArgument(format!(
                    "edema T2 {} outside (0, 200] ms",
                    self.t2_myo_ms + w.delta_t2_ms
                )));
            }
        }
        Ok(())
    }
}

/// One slice of synthetic data: the multi-echo images, the label map, and
/// the ground-truth T2 map (valid on foreground pixels only).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub volume: MultiEchoVolume,
    pub labels: SegMap,
    pub t2_truth: T2Map,
}

/// Evaluates the decay model on the spec's geometry. Background pixels have
/// zero signal, zero truth, and an invalid flag.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Sample> {
    spec.validate()?;
    let n = spec.side;
    let center = (n as f64 - 1.0) / 2.0;
    let mut labels = vec![0u8; n * n];
    let mut t2 = vec![0.0f64; n * n];
    let mut s0 = vec![0.0f64; n * n];
    let mut valid = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            let dr = r as f64 - center;
            let dc = c as f64 - center;
            let d = (dr * dr + dc * dc).sqrt();
            let d_rv = (dr * dr + (dc + spec.rv_offset) * (dc + spec.rv_offset)).sqrt();
            let i = r * n + c;
            let (inner, outer) = spec.myo_radii;
            if d >= inner && d <= outer {
                labels[i] = CLASS_MYO;
                t2[i] = spec.t2_myo_ms;
                s0[i] = spec.s0_myo;
                if let Some(w) = &spec.edema {
                    let theta = (-dr).atan2(dc);
                    if (theta - w.start_rad).rem_euclid(TAU) < w.span_rad {
                        t2[i] += w.delta_t2_ms;
                    }
                }
            } else if d < spec.lv_radius {
                labels[i] = CLASS_LV;
                t2[i] = spec.t2_lv_ms;
                s0[i] = spec.s0_lv;
            } else if d_rv <= spec.rv_radius && d > outer {
                labels[i] = CLASS_RV;
                t2[i] = spec.t2_rv_ms;
                s0[i] = spec.s0_rv;
            } else {
                continue;
            }
            valid[i] = true;
        }
    }
    let mut data = Vec::with_capacity(spec.echoes_ms.len() * n * n);
    for &te in &spec.echoes_ms {
        for i in 0..n * n {
            data.push(if valid[i] { s0[i] * (-te / t2[i]).exp() } else { 0.0 });
        }
    }
    Ok(Sample {
        volume: MultiEchoVolume::new(spec.echoes_ms.clone(), 1, n, n, data)?,
        labels: SegMap::new(n, n, labels)?,
        t2_truth: T2Map::new(n, n, t2, valid)?,
    })
}

/// Stacks per-slice phantoms into one multi-slice volume. All specs must
/// agree on side and echo times.
pub fn gen_phantom_stack(
    specs: &[PhantomSpec],
) -> Result<(MultiEchoVolume, Vec<SegMap>, Vec<T2Map>)> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("phantom stack wants at least one spec".into()));
    }
    let side = specs[0].side;
    let echoes = specs[0].echoes_ms.clone();
    let mut data = Vec::with_capacity(specs.len() * echoes.len() * side * side);
    let mut labels = Vec::with_capacity(specs.len());
    let mut truth = Vec::with_capacity(specs.len());
    for spec in specs {
        if spec.side != side || spec.echoes_ms != echoes {
            return Err(Error::ConfigMismatch(format!(
                "stack mixes side {}/{} or echo times {:?}/{:?}",
                side, spec.side, echoes, spec.echoes_ms
            )));
        }
        let s = gen_phantom(spec)?;
        data.extend_from_slice(s.volume.data());
        labels.push(s.labels);
        truth.push(s.t2_truth);
    }
    Ok((MultiEchoVolume::new(echoes, specs.len(), side, side, data)?, labels, truth))
}

/// Adds i.i.d. Gaussian noise to every voxel and clamps to [0, 1]. A zero
/// std is the exact identity.
pub fn add_gaussian_noise(v: &MultiEchoVolume, std: f64, seed: u64) -> Result<MultiEchoVolume> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise std {std} must be >= 0")));
    }
    if std == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let data = v.data().iter().map(|&x| (x + dist.sample(&mut rng)).clamp(0.0, 1.0)).collect();
    MultiEchoVolume::new(v.echoes_ms().to_vec(), v.slices(), v.height(), v.width(), data)
}

/// Backward map: output pixel coordinates to source coordinates.
type WarpMap<'a> = dyn Fn(f64, f64) -> (f64, f64) + 'a;

fn sample_bilinear(plane: &[f64], h: usize, w: usize, r: f64, c: f64) -> f64 {
    let r = r.clamp(0.0, (h - 1) as f64);
    let c = c.clamp(0.0, (w - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
    let bot = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
    top * (1.0 - fr) + bot * fr
}

fn nearest_index(h: usize, w: usize, r: f64, c: f64) -> usize {
    let ri = (r.round().clamp(0.0, (h - 1) as f64)) as usize;
    let ci = (c.round().clamp(0.0, (w - 1) as f64)) as usize;
    ri * w + ci
}

/// Applies one backward map to every plane of a sample: echo images
/// bilinearly, labels and truth nearest-neighbor from the same source pixel.
/// Tissue identity is discrete, so a warped pixel carries one source tissue's
/// T2 rather than a partial-volume mixture, and validity stays aligned with
/// the warped labels.
fn warp_sample(s: &Sample, map: &WarpMap) -> Sample {
    let h = s.labels.height;
    let w = s.labels.width;
    assert_eq!(s.volume.slices(), 1, "augmentation expects single-slice samples");
    let mut coords = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            coords.push(map(r as f64, c as f64));
        }
    }
    let ne = s.volume.num_echoes();
    let mut data = Vec::with_capacity(ne * h * w);
    for e in 0..ne {
        let plane = s.volume.plane(0, e);
        data.extend(coords.iter().map(|&(sr, sc)| {
            sample_bilinear(plane, h, w, sr, sc).clamp(0.0, 1.0)
        }));
    }
    let src: Vec<usize> =
        coords.iter().map(|&(sr, sc)| nearest_index(h, w, sr, sc)).collect();
    let labels: Vec<u8> = src.iter().map(|&i| s.labels.data[i]).collect();
    let t2: Vec<f64> = src.iter().map(|&i| s.t2_truth.values_ms[i]).collect();
    let valid = labels.iter().map(|&l| l != 0).collect();
    Sample {
        volume: MultiEchoVolume::new(
            s.volume.echoes_ms().to_vec(),
            1,
            h,
            w,
            data,
        )
        .expect("warped volume keeps its shape"),
        labels: SegMap::new(h, w, labels).expect("nearest-neighbor keeps label values"),
        t2_truth: T2Map::new(h, w, t2, valid).expect("warped truth keeps its shape"),
    }
}

fn rotation_map(h: usize, w: usize, theta: f64) -> impl Fn(f64, f64) -> (f64, f64) {
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    move |r, c| {
        let y = r - cr;
        let x = c - cc;
        (cr + cos * y - sin * x, cc + sin * y + cos * x)
    }
}

fn crop_resize_map(h: usize, w: usize, factor: f64) -> impl Fn(f64, f64) -> (f64, f64) {
    // Centered crop of side factor*n scaled back up, in half-pixel-centered
    // coordinates so factor 1 is the identity.
    let oy = h as f64 * (1.0 - factor) / 2.0;
    let ox = w as f64 * (1.0 - factor) / 2.0;
    move |r, c| (factor * (r + 0.5) - 0.5 + oy, factor * (c + 0.5) - 0.5 + ox)
}

fn gaussian_blur_plane(plane: &mut Vec<f64>, h: usize, w: usize, sigma: f64) {
    assert!(sigma > 0.0, "blur sigma must be positive, got {sigma}");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-0.5 * (k as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for v in &mut kernel {
        *v /= norm;
    }
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let cc = clamp(c as isize + ki as isize - radius, w);
                acc += kv * plane[r * w + cc];
            }
            tmp[r * w + c] = acc;
        }
    }
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let rr = clamp(r as isize + ki as isize - radius, h);
                acc += kv * tmp[rr * w + c];
            }
            plane[r * w + c] = acc;
        }
    }
}

fn elastic_field(h: usize, w: usize, sigma: f64, alpha: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dr: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut dc: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    gaussian_blur_plane(&mut dr, h, w, sigma);
    gaussian_blur_plane(&mut dc, h, w, sigma);
    for v in dr.iter_mut().chain(dc.iter_mut()) {
        *v *= alpha;
    }
    (dr, dc)
}

/// Smooth random deformation: displacement field alpha * blur(U(-1,1), sigma)
/// applied by backward warping. Alpha 0 is the exact identity; displacement
/// magnitude never exceeds alpha per axis.
pub fn elastic_deform(s: &Sample, sigma: f64, alpha: f64, seed: u64) -> Sample {
    assert!(sigma > 0.0 && alpha >= 0.0, "elastic wants sigma > 0, alpha >= 0");
    if alpha == 0.0 {
        return s.clone();
    }
    let h = s.labels.height;
    let w = s.labels.width;
    let (dr, dc) = elastic_field(h, w, sigma, alpha, seed);
    warp_sample(s, &move |r: f64, c: f64| {
        let i = r as usize * w + c as usize;
        (r + dr[i], c + dc[i])
    })
}

/// Elastic defaults for 64-pixel phantoms.
pub const ELASTIC_SIGMA: f64 = 8.0;
pub const ELASTIC_ALPHA: f64 = 20.0;

/// The fixed eight-variant augmentation set: identity, horizontal flip,
/// vertical flip, rotation within 15 degrees, centered crop-and-resize with
/// factor in [0.8, 1), elastic deformation, flip composed with elastic, and
/// rotation composed with crop. Every variant transforms images, labels, and
/// truth with the identical geometric map; deterministic per seed.
pub fn augment8(s: &Sample, seed: u64) -> Vec<Sample> {
    let h = s.labels.height;
    let w = s.labels.width;
    let hflip = move |r: f64, c: f64| (r, w as f64 - 1.0 - c);
    let vflip = move |r: f64, c: f64| (h as f64 - 1.0 - r, c);
    let max_rot = 15.0f64.to_radians();

    let mut out = Vec::with_capacity(8);
    out.push(s.clone());
    out.push(warp_sample(s, &hflip));
    out.push(warp_sample(s, &vflip));
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(seed, 3));
        let theta = rng.gen_range(-max_rot..max_rot);
        out.push(warp_sample(s, &rotation_map(h, w, theta)));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(seed, 4));
        let factor = rng.gen_range(0.8..1.0);
        out.push(warp_sample(s, &crop_resize_map(h, w, factor)));
    }
    out.push(elastic_deform(s, ELASTIC_SIGMA, ELASTIC_ALPHA, seed_mix(seed, 5)));
    {
        // Flip, then deform the flipped image.
        let (dr, dc) = elastic_field(h, w, ELASTIC_SIGMA, ELASTIC_ALPHA, seed_mix(seed, 6));
        let map = move |r: f64, c: f64| {
            let i = r as usize * w + c as usize;
            hflip(r + dr[i], c + dc[i])
        };
        out.push(warp_sample(s, &map));
    }
    {
        // Crop, then rotate the cropped image.
        let mut rng = ChaCha8Rng::seed_from_u64(seed_mix(seed, 7));
        let theta = rng.gen_range(-max_rot..max_rot);
        let factor = rng.gen_range(0.8..1.0);
        let rot = rotation_map(h, w, theta);
        let crop = crop_resize_map(h, w, factor);
        let map = move |r: f64, c: f64| {
            let (rr, cc) = rot(r, c);
            crop(rr, cc)
        };
        out.push(warp_sample(s, &map));
    }
    out
}
