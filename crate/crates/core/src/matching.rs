//! Patch photoconsistency (NCC / TNCC) and cost-volume construction.

use nalgebra::Point2;
use rayon::prelude::*;

use crate::geometry::{warp, Pose, StereoRig};
use crate::grid::{GrayImage, Grid, MaskMap, ScalarMap};

pub const PATCH_RADIUS: isize = 2;
const PATCH_TAPS: f64 = 25.0;
/// Patch variance below which NCC is treated as undefined.
pub const DEGENERATE_VARIANCE: f64 = 1e-8;

/// Mean and standard deviation of the 5x5 edge-replicated patch at every pixel.
#[derive(Clone, Debug)]
pub struct PatchStats {
    pub mean: ScalarMap,
    pub std: ScalarMap,
}

impl PatchStats {
    pub fn new(img: &GrayImage) -> Self {
        let (w, h) = img.dims();
        let stats = Grid::par_from_fn(w, h, |x, y| {
            let mut taps = [0.0; 25];
            let mut i = 0;
            for dy in -PATCH_RADIUS..=PATCH_RADIUS {
                for dx in -PATCH_RADIUS..=PATCH_RADIUS {
                    taps[i] = img.get_clamped(x as isize + dx, y as isize + dy);
                    i += 1;
                }
            }
            let mean = taps.iter().sum::<f64>() / PATCH_TAPS;
            let var = taps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / PATCH_TAPS;
            // Rounding residue of a constant patch.
            let var = if var < 1e-24 { 0.0 } else { var };
            (mean, var.sqrt())
        });
        Self {
            mean: stats.map(|s| s.0),
            std: stats.map(|s| s.1),
        }
    }
}

#[inline]
fn is_degenerate(std: f64) -> bool {
    std * std < DEGENERATE_VARIANCE
}

/// Zero-mean NCC between the patch at pixel `p` of `a` and the bilinearly
/// sampled patch around the continuous point `q` of `b`.
///
/// Returns `None` when `q` is outside `b`; 0 when either patch is flat.
pub fn ncc(a: &GrayImage, p: (usize, usize), b: &GrayImage, q: Point2<f64>) -> Option<f64> {
    let q = snap(q);
    if !b.contains_point(q.x, q.y) {
        return None;
    }
    let mut pa = [0.0; 25];
    let mut pb = [0.0; 25];
    let mut i = 0;
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            pa[i] = a.get_clamped(p.0 as isize + dx, p.1 as isize + dy);
            pb[i] = b.sample(q.x + dx as f64, q.y + dy as f64);
            i += 1;
        }
    }
    Some(ncc_of_patches(&pa, &pb))
}

/// Direct zero-mean NCC of two equally sized sample sets.
pub fn ncc_of_patches(pa: &[f64], pb: &[f64]) -> f64 {
    let n = pa.len() as f64;
    let ma = pa.iter().sum::<f64>() / n;
    let mb = pb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in pa.iter().zip(pb) {
        let da = x - ma;
        let db = y - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa / n < DEGENERATE_VARIANCE || sbb / n < DEGENERATE_VARIANCE {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Near-integer coordinates are snapped so integer warps take the exact path.
#[inline]
fn snap(q: Point2<f64>) -> Point2<f64> {
    let rx = q.x.round();
    let ry = q.y.round();
    Point2::new(
        if (q.x - rx).abs() < 1e-9 { rx } else { q.x },
        if (q.y - ry).abs() < 1e-9 { ry } else { q.y },
    )
}

/// `min(1 - NCC, tau)`, with `tau` for an invalid correspondence.
#[inline]
pub fn tncc_from_ncc(ncc: Option<f64>, tau: f64) -> f64 {
    match ncc {
        Some(v) => (1.0 - v).min(tau),
        None => tau,
    }
}

pub fn tncc(a: &GrayImage, p: (usize, usize), b: &GrayImage, q: Point2<f64>, tau: f64) -> f64 {
    tncc_from_ncc(ncc(a, p, b, q), tau)
}

/// Precomputed patch statistics for a pair of images, used for integer shifts.
pub struct PairMatcher<'a> {
    b: &'a GrayImage,
    sa: PatchStats,
    sb: PatchStats,
    // Edge-replicated copies with a PATCH_RADIUS border.
    pa: GrayImage,
    pb: GrayImage,
}

fn pad(img: &GrayImage) -> GrayImage {
    let r = PATCH_RADIUS;
    let (w, h) = img.dims();
    Grid::from_fn(w + 2 * r as usize, h + 2 * r as usize, |x, y| {
        img.get_clamped(x as isize - r, y as isize - r)
    })
}

impl<'a> PairMatcher<'a> {
    pub fn new(a: &'a GrayImage, b: &'a GrayImage) -> Self {
        Self {
            b,
            sa: PatchStats::new(a),
            sb: PatchStats::new(b),
            pa: pad(a),
            pb: pad(b),
        }
    }

    pub fn source_stats(&self) -> &PatchStats {
        &self.sa
    }

    /// NCC between pixel `(x, y)` of `a` and pixel `(qx, qy)` of `b`.
    #[inline]
    pub fn ncc_at(&self, x: usize, y: usize, qx: isize, qy: isize) -> Option<f64> {
        if !self.b.contains(qx, qy) {
            return None;
        }
        let (qx, qy) = (qx as usize, qy as usize);
        let sa = self.sa.std.get(x, y);
        let sb = self.sb.std.get(qx, qy);
        if is_degenerate(sa) || is_degenerate(sb) {
            return Some(0.0);
        }
        let side = 2 * PATCH_RADIUS as usize + 1;
        let mut sab = 0.0;
        for dy in 0..side {
            let ra = &self.pa.row(y + dy)[x..x + side];
            let rb = &self.pb.row(qy + dy)[qx..qx + side];
            for (va, vb) in ra.iter().zip(rb) {
                sab += va * vb;
            }
        }
        let cov = sab / PATCH_TAPS - self.sa.mean.get(x, y) * self.sb.mean.get(qx, qy);
        Some((cov / (sa * sb)).clamp(-1.0, 1.0))
    }

    #[inline]
    pub fn tncc_at(&self, x: usize, y: usize, qx: isize, qy: isize, tau: f64) -> f64 {
        tncc_from_ncc(self.ncc_at(x, y, qx, qy), tau)
    }
}

/// A rectangular integer label grid `[u_min, u_min + nu) x [v_min, v_min + nv)`.
///
/// Label index `l = iu * nv + iv`, so index order is lexicographic in `(u, v)`.
/// Disparity label spaces have `nv = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    pub u_min: i32,
    pub nu: usize,
    pub v_min: i32,
    pub nv: usize,
}

impl LabelSpace {
    /// Disparities `0..=max`.
    pub fn disparity(max: usize) -> Self {
        Self {
            u_min: 0,
            nu: max + 1,
            v_min: 0,
            nv: 1,
        }
    }

    pub fn flow(range: &FlowRange) -> Self {
        Self {
            u_min: range.u_min,
            nu: (range.u_max - range.u_min + 1) as usize,
            v_min: range.v_min,
            nv: (range.v_max - range.v_min + 1) as usize,
        }
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.nu * self.nv
    }

    #[inline]
    pub fn label(&self, index: usize) -> (i32, i32) {
        (
            self.u_min + (index / self.nv) as i32,
            self.v_min + (index % self.nv) as i32,
        )
    }

    #[inline]
    pub fn index(&self, u: i32, v: i32) -> Option<usize> {
        let iu = u - self.u_min;
        let iv = v - self.v_min;
        (iu >= 0 && iv >= 0 && (iu as usize) < self.nu && (iv as usize) < self.nv)
            .then(|| iu as usize * self.nv + iv as usize)
    }

    pub fn is_1d(&self) -> bool {
        self.nv == 1
    }
}

/// Integer 2D search range `[u_min, u_max] x [v_min, v_max]`, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowRange {
    pub u_min: i32,
    pub u_max: i32,
    pub v_min: i32,
    pub v_max: i32,
}

impl FlowRange {
    pub fn new(u_min: i32, u_max: i32, v_min: i32, v_max: i32) -> Self {
        assert!(u_min <= u_max && v_min <= v_max, "empty flow range");
        Self {
            u_min,
            u_max,
            v_min,
            v_max,
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u_min as f64 && u <= self.u_max as f64 && v >= self.v_min as f64 && v <= self.v_max as f64
    }

    pub fn union(&self, o: &FlowRange) -> FlowRange {
        FlowRange::new(
            self.u_min.min(o.u_min),
            self.u_max.max(o.u_max),
            self.v_min.min(o.v_min),
            self.v_max.max(o.v_max),
        )
    }

    pub fn padded(&self, pad: i32) -> FlowRange {
        FlowRange::new(self.u_min - pad, self.u_max + pad, self.v_min - pad, self.v_max + pad)
    }

    pub fn width(&self) -> usize {
        (self.u_max - self.u_min + 1) as usize
    }

    pub fn height(&self) -> usize {
        (self.v_max - self.v_min + 1) as usize
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Negated range, for matching in the reverse direction.
    pub fn reversed(&self) -> FlowRange {
        FlowRange::new(-self.u_max, -self.u_min, -self.v_max, -self.v_min)
    }
}

/// Per-pixel, per-label matching costs in `[0, tau]` over a rectangular
/// window `[origin, origin + (width, height))` of the reference image.
#[derive(Clone, Debug)]
pub struct CostVolume {
    pub origin: (usize, usize),
    pub width: usize,
    pub height: usize,
    pub labels: LabelSpace,
    pub tau: f32,
    /// Pixels taking part in the labeling problem; `None` means all.
    pub active: Option<MaskMap>,
    data: Vec<f32>,
}

impl CostVolume {
    pub fn filled(width: usize, height: usize, labels: LabelSpace, tau: f32) -> Self {
        assert!(labels.count() > 0, "label set must be non-empty");
        Self {
            origin: (0, 0),
            width,
            height,
            labels,
            tau,
            active: None,
            data: vec![tau; width * height * labels.count()],
        }
    }

    pub fn from_vec(width: usize, height: usize, labels: LabelSpace, tau: f32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * labels.count(), "cost volume size mismatch");
        Self {
            origin: (0, 0),
            width,
            height,
            labels,
            tau,
            active: None,
            data,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        labels: LabelSpace,
        tau: f32,
        f: impl Fn(usize, usize, &mut [f32]) + Sync,
    ) -> Self {
        let mut vol = Self::filled(width, height, labels, tau);
        let n = labels.count();
        vol.data
            .par_chunks_mut(width * n)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, costs) in row.chunks_mut(n).enumerate() {
                    f(x, y, costs);
                }
            });
        vol
    }

    #[inline]
    pub fn costs(&self, x: usize, y: usize) -> &[f32] {
        let n = self.labels.count();
        let i = (y * self.width + x) * n;
        &self.data[i..i + n]
    }

    #[inline]
    pub fn costs_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let n = self.labels.count();
        let i = (y * self.width + x) * n;
        &mut self.data[i..i + n]
    }

    #[inline]
    pub fn cost(&self, x: usize, y: usize, label: usize) -> f32 {
        self.data[(y * self.width + x) * self.labels.count() + label]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn is_active(&self, x: usize, y: usize) -> bool {
        self.active.as_ref().map_or(true, |m| m.get(x, y))
    }

    /// Keep only labels `0..=max` of a disparity volume.
    pub fn truncated_to(&self, max: usize) -> CostVolume {
        assert!(self.labels.is_1d());
        let keep = (max + 1).min(self.labels.nu);
        let n = self.labels.count();
        let mut data = Vec::with_capacity(self.width * self.height * keep);
        for chunk in self.data.chunks(n) {
            data.extend_from_slice(&chunk[..keep]);
        }
        CostVolume {
            origin: self.origin,
            width: self.width,
            height: self.height,
            labels: LabelSpace {
                nu: keep,
                ..self.labels
            },
            tau: self.tau,
            active: self.active.clone(),
            data,
        }
    }
}

/// Left-reference stereo volume: `cost(p, d) = TNCC(p, p - (d, 0))`.
pub fn stereo_cost_volume(left: &GrayImage, right: &GrayImage, max_disparity: usize, tau: f64) -> CostVolume {
    let m = PairMatcher::new(left, right);
    CostVolume::from_fn(
        left.width(),
        left.height(),
        LabelSpace::disparity(max_disparity),
        tau as f32,
        |x, y, costs| {
            for (d, c) in costs.iter_mut().enumerate() {
                *c = m.tncc_at(x, y, x as isize - d as isize, y as isize, tau) as f32;
            }
        },
    )
}

/// Right-reference stereo volume: `cost(p, d) = TNCC(p, p + (d, 0))`.
pub fn stereo_cost_volume_right(left: &GrayImage, right: &GrayImage, max_disparity: usize, tau: f64) -> CostVolume {
    let m = PairMatcher::new(right, left);
    CostVolume::from_fn(
        right.width(),
        right.height(),
        LabelSpace::disparity(max_disparity),
        tau as f32,
        |x, y, costs| {
            for (d, c) in costs.iter_mut().enumerate() {
                *c = m.tncc_at(x, y, x as isize + d as isize, y as isize, tau) as f32;
            }
        },
    )
}

/// Disparity volume against an arbitrary target view related by `pose`.
///
/// Only pixels in `active` (all if `None`) are evaluated; the rest stay at `tau`.
pub fn pose_cost_volume(
    reference: &GrayImage,
    target: &GrayImage,
    max_disparity: usize,
    rig: &StereoRig,
    pose: &Pose,
    tau: f64,
    active: Option<&MaskMap>,
) -> CostVolume {
    CostVolume::from_fn(
        reference.width(),
        reference.height(),
        LabelSpace::disparity(max_disparity),
        tau as f32,
        |x, y, costs| {
            if active.is_some_and(|m| !m.get(x, y)) {
                return;
            }
            let p = Point2::new(x as f64, y as f64);
            for (d, c) in costs.iter_mut().enumerate() {
                let w = warp(p, d as f64, rig, pose);
                *c = if w.in_front {
                    tncc(reference, (x, y), target, w.point, tau) as f32
                } else {
                    tau as f32
                };
            }
        },
    )
}

/// 2D-shift volume over the bounding box of `mask`: `cost(p, u) = TNCC(p, p + u)`.
///
/// Returns `None` for an empty mask.
pub fn flow_cost_volume(
    reference: &GrayImage,
    target: &GrayImage,
    range: &FlowRange,
    tau: f64,
    mask: &MaskMap,
) -> Option<CostVolume> {
    let (x0, y0, x1, y1) = mask_bbox(mask)?;
    let labels = LabelSpace::flow(range);
    let m = PairMatcher::new(reference, target);
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut vol = CostVolume::from_fn(bw, bh, labels, tau as f32, |bx, by, costs| {
        let (x, y) = (bx + x0, by + y0);
        if !mask.get(x, y) {
            return;
        }
        for (l, c) in costs.iter_mut().enumerate() {
            let (u, v) = labels.label(l);
            *c = m.tncc_at(x, y, x as isize + u as isize, y as isize + v as isize, tau) as f32;
        }
    });
    vol.origin = (x0, y0);
    vol.active = Some(Grid::from_fn(bw, bh, |bx, by| mask.get(bx + x0, by + y0)));
    Some(vol)
}

/// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
pub fn mask_bbox(mask: &MaskMap) -> Option<(usize, usize, usize, usize)> {
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                bb = Some(match bb {
                    None => (x, y, x, y),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                });
            }
        }
    }
    bb
}

/// `min(StdDev(5x5 patch), tau_w) / tau_w`.
pub fn patch_stddev_weight(img: &GrayImage, tau_w: f64) -> ScalarMap {
    PatchStats::new(img).std.map(|&s| s.min(tau_w) / tau_w)
}
