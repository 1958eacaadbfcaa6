//! Initial motion segmentation: unary term maps, contrast-sensitive Potts
//! weights, superpixel cost smoothing, block-matching prior flow, the ground
//! prior and the GrabCut-style alternation between graph cuts and color
//! models.

use nalgebra::{Matrix3, Point2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edges::{neighbor_mean, EdgeWeightMap, KAPPA_FLOOR};
use crate::error::Result;
use crate::geometry::{visibility_map, warp, Pose, StereoRig};
use crate::grid::{binomial_blur, resize_scalar, ColorImage, GrayImage, Grid, MaskMap, ScalarMap, VectorMap};
use crate::matching::{tncc, PatchStats};
use crate::maxflow::{BinaryMrf, GraphCut};

#[derive(Clone, Debug, PartialEq)]
pub struct SegParams {
    /// TNCC truncation.
    pub tau: f64,
    pub lambda_ncc: f64,
    pub tau_ncc: f64,
    pub tau_w: f64,
    pub lambda_flo: f64,
    pub tau_flo: f64,
    pub gamma_flo: f64,
    pub lambda_col: f64,
    pub lambda_potts: f64,
    pub kappa3: f64,
    pub lambda_mask: f64,
    pub lambda_gro: f64,
    pub max_iterations: usize,
    pub superpixels: usize,
}

impl Default for SegParams {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda_ncc: 4.0,
            tau_ncc: 0.5,
            tau_w: 0.005,
            lambda_flo: 4.0,
            tau_flo: 0.75,
            gamma_flo: 0.3,
            lambda_col: 0.5,
            lambda_potts: 10.0,
            kappa3: 0.2,
            lambda_mask: 2.0,
            lambda_gro: 10.0,
            max_iterations: 5,
            superpixels: 850,
        }
    }
}

// ---------------------------------------------------------------------------
// Color models

pub const COLOR_BINS: usize = 64;
const HIST_LEN: usize = COLOR_BINS * COLOR_BINS * COLOR_BINS;

#[inline]
pub fn color_bin(c: &[f64; 3]) -> usize {
    let q = |v: f64| ((v * COLOR_BINS as f64).floor() as isize).clamp(0, COLOR_BINS as isize - 1) as usize;
    (q(c[0]) * COLOR_BINS + q(c[1])) * COLOR_BINS + q(c[2])
}

/// Background (`bg`) and foreground (`fg`) RGB histograms, each normalized
/// with one pseudo-count per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorModel {
    pub bg: Vec<f64>,
    pub fg: Vec<f64>,
}

impl ColorModel {
    pub fn uniform() -> Self {
        let v = vec![1.0 / HIST_LEN as f64; HIST_LEN];
        Self { bg: v.clone(), fg: v }
    }

    /// Histograms of the pixels labeled 0 and 1 in `mask`.
    pub fn from_mask(img: &ColorImage, mask: &MaskMap) -> Self {
        let mut bg = vec![1.0; HIST_LEN];
        let mut fg = vec![1.0; HIST_LEN];
        for (c, &m) in img.iter().zip(mask.iter()) {
            if m {
                fg[color_bin(c)] += 1.0;
            } else {
                bg[color_bin(c)] += 1.0;
            }
        }
        for h in [&mut bg, &mut fg] {
            let s: f64 = h.iter().sum();
            h.iter_mut().for_each(|v| *v /= s);
        }
        Self { bg, fg }
    }

    /// `(1 - w) * self + w * other`, binwise.
    pub fn blend(&self, other: &ColorModel, w: f64) -> ColorModel {
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect();
        ColorModel {
            bg: mix(&self.bg, &other.bg),
            fg: mix(&self.fg, &other.fg),
        }
    }

    #[inline]
    pub fn log_ratio(&self, c: &[f64; 3]) -> f64 {
        let b = color_bin(c);
        self.fg[b].ln() - self.bg[b].ln()
    }
}

/// Running arithmetic mean of per-frame color models.
#[derive(Clone, Debug, Default)]
pub struct ColorModelAverage {
    mean: Option<ColorModel>,
    count: usize,
}

impl ColorModelAverage {
    pub fn push(&mut self, model: &ColorModel) {
        self.count += 1;
        self.mean = Some(match &self.mean {
            None => model.clone(),
            Some(m) => m.blend(model, 1.0 / self.count as f64),
        });
    }

    pub fn mean(&self) -> Option<&ColorModel> {
        self.mean.as_ref()
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

/// `lambda * (log theta_1(I_p) - log theta_0(I_p))`.
pub fn color_term(img: &ColorImage, model: &ColorModel, lambda: f64) -> ScalarMap {
    img.map(|c| lambda * model.log_ratio(c))
}

// ---------------------------------------------------------------------------
// Data terms

/// `min(StdDev(5x5), tau_w) / tau_w` of the reference image.
pub fn variance_weight(img: &GrayImage, tau_w: f64) -> ScalarMap {
    PatchStats::new(img).std.map(|&s| s.min(tau_w) / tau_w)
}

/// Average over the targets of `TNCC - tau_ncc` at the rigidly warped
/// location, scaled by `lambda_ncc * w_var`.
///
/// Each target is an image with the pose taking reference-camera points into
/// its camera. Targets where the warp leaves the image are skipped; targets
/// where the point is predicted occluded contribute at most 0.
pub fn appearance_term(
    reference: &GrayImage,
    targets: &[(&GrayImage, Pose)],
    disparity: &ScalarMap,
    rig: &StereoRig,
    w_var: &ScalarMap,
    params: &SegParams,
) -> ScalarMap {
    let visible: Vec<MaskMap> = targets
        .iter()
        .map(|(_, pose)| visibility_map(disparity, rig, pose))
        .collect();
    let (w, h) = reference.dims();
    Grid::par_from_fn(w, h, |x, y| {
        let d = disparity.get(x, y);
        if !d.is_finite() {
            return 0.0;
        }
        let p = Point2::new(x as f64, y as f64);
        let (mut sum, mut n) = (0.0, 0usize);
        for ((img, pose), vis) in targets.iter().zip(&visible) {
            let r = warp(p, d, rig, pose);
            if !r.in_front || !img.contains_point(r.point.x, r.point.y) {
                continue;
            }
            let mut c = tncc(reference, (x, y), img, r.point, params.tau) - params.tau_ncc;
            if !vis.get(x, y) {
                c = c.min(0.0);
            }
            sum += c;
            n += 1;
        }
        if n == 0 {
            return 0.0;
        }
        let v = params.lambda_ncc * w_var.get(x, y) * sum / n as f64;
        debug_assert!(v >= -params.lambda_ncc * params.tau_ncc - 1e-9);
        debug_assert!(v <= params.lambda_ncc * (params.tau - params.tau_ncc) + 1e-9);
        v
    })
}

/// Normalized flow residual `lambda_flo * w * (min(r, 2 tau_p) - tau_p) / tau_p`
/// with `tau_p = max(tau_flo, gamma |F_rig|)`; 0 where the prior is invalid.
pub fn flow_term(
    rigid: &VectorMap,
    prior: &VectorMap,
    valid: &MaskMap,
    w_var: &ScalarMap,
    params: &SegParams,
) -> ScalarMap {
    let (w, h) = rigid.dims();
    Grid::from_fn(w, h, |x, y| {
        let (fr, fp) = (rigid.get(x, y), prior.get(x, y));
        if !valid.get(x, y) || !fr.x.is_finite() || !fp.x.is_finite() {
            return 0.0;
        }
        flow_residual_cost((fr - fp).norm(), fr.norm(), w_var.get(x, y), params)
    })
}

#[inline]
pub fn flow_residual_cost(r: f64, rigid_norm: f64, w: f64, params: &SegParams) -> f64 {
    let tau = params.tau_flo.max(params.gamma_flo * rigid_norm);
    let v = params.lambda_flo * w * (r.min(2.0 * tau) - tau) / tau;
    debug_assert!(v.abs() <= params.lambda_flo * w + 1e-9);
    v
}

/// Priors carried over from earlier frames.
#[derive(Clone, Debug, Default)]
pub struct SegPriors {
    /// Signed soft mask in [-0.1, 1].
    pub mask: Option<ScalarMap>,
    /// Average of past color models.
    pub color: Option<ColorModel>,
    /// Ground prior, <= 0.
    pub ground: Option<ScalarMap>,
}

/// `lambda_mask * C_mask + C_pcol + C_gro`; zero without priors.
pub fn prior_term(img: &ColorImage, priors: &SegPriors, params: &SegParams) -> ScalarMap {
    let (w, h) = img.dims();
    let mut out = Grid::new(w, h, 0.0);
    if let Some(m) = &priors.mask {
        out.data_mut().iter_mut().zip(m.iter()).for_each(|(o, v)| *o += params.lambda_mask * v);
    }
    if let Some(c) = &priors.color {
        out.data_mut()
            .iter_mut()
            .zip(img.iter())
            .for_each(|(o, p)| *o += params.lambda_col * c.log_ratio(p));
    }
    if let Some(g) = &priors.ground {
        out.data_mut().iter_mut().zip(g.iter()).for_each(|(o, v)| *o += v);
    }
    out
}

/// Previous mask forward-warped by the previous flow (nearest-pixel
/// scatter), dilated by `dilation`: 1 inside, -0.1 elsewhere.
pub fn soft_mask(prev_mask: &MaskMap, prev_flow: &VectorMap, dilation: usize) -> ScalarMap {
    let (w, h) = prev_mask.dims();
    let mut hit = Grid::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if !prev_mask.get(x, y) {
                continue;
            }
            let f = prev_flow.get(x, y);
            if !f.x.is_finite() || !f.y.is_finite() {
                continue;
            }
            let (qx, qy) = ((x as f64 + f.x).round() as isize, (y as f64 + f.y).round() as isize);
            if hit.contains(qx, qy) {
                hit.set(qx as usize, qy as usize, true);
            }
        }
    }
    hit.dilate(dilation).map(|&m| if m { 1.0 } else { -0.1 })
}

/// Disparity plane `d = a u + b v + c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl GroundPlane {
    #[inline]
    pub fn at(&self, u: f64, v: f64) -> f64 {
        self.a * u + self.b * v + self.c
    }

    /// Disparity grows downwards and the plane is not strongly tilted sideways.
    pub fn is_ground(&self) -> bool {
        self.b > MIN_GROUND_SLOPE && self.a.abs() < 0.1 * self.b
    }
}

const GROUND_ITERATIONS: usize = 200;
const GROUND_INLIER: f64 = 1.0;
const GROUND_MIN_SUPPORT: f64 = 0.2;
/// Round-off level; flatter planes are fronto-parallel.
const MIN_GROUND_SLOPE: f64 = 1e-9;

fn plane_through(pts: &[(f64, f64, f64)]) -> Option<GroundPlane> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for &(u, v, d) in pts {
        let r = Vector3::new(u, v, 1.0);
        ata += r * r.transpose();
        atb += r * d;
    }
    let s = ata.lu().solve(&atb)?;
    s.iter().all(|v| v.is_finite()).then_some(GroundPlane { a: s.x, b: s.y, c: s.z })
}

/// RANSAC fit of a ground disparity plane; `None` when no ground-like plane
/// is supported by at least 20% of the valid pixels.
pub fn fit_ground_plane(disparity: &ScalarMap, seed: u64) -> Option<GroundPlane> {
    let pts: Vec<(f64, f64, f64)> = (0..disparity.height())
        .flat_map(|y| (0..disparity.width()).map(move |x| (x, y)))
        .filter_map(|(x, y)| {
            let d = disparity.get(x, y);
            (d.is_finite() && d > 0.0).then_some((x as f64, y as f64, d))
        })
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let total = disparity.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = |pl: &GroundPlane| pts.iter().filter(|p| (p.2 - pl.at(p.0, p.1)).abs() < GROUND_INLIER).count();
    let mut best: Option<(usize, GroundPlane)> = None;
    for _ in 0..GROUND_ITERATIONS {
        let s: Vec<(f64, f64, f64)> = (0..3).map(|_| pts[rng.random_range(0..pts.len())]).collect();
        let Some(pl) = plane_through(&s) else { continue };
        if !pl.is_ground() {
            continue;
        }
        let n = support(&pl);
        if best.as_ref().map_or(true, |b| n > b.0) {
            best = Some((n, pl));
        }
    }
    let (n, pl) = best?;
    if (n as f64) < GROUND_MIN_SUPPORT * total {
        return None;
    }
    let inliers: Vec<(f64, f64, f64)> = pts
        .iter()
        .filter(|p| (p.2 - pl.at(p.0, p.1)).abs() < GROUND_INLIER)
        .cloned()
        .collect();
    match plane_through(&inliers) {
        Some(refit) if refit.is_ground() && support(&refit) >= n => Some(refit),
        _ => Some(pl),
    }
}

/// `lambda_gro * (min(r, tau_gro) / tau_gro - 1)` with `r` the distance to
/// the ground plane and `tau_gro = 0.01 * d_max`; a zero map without a plane.
pub fn ground_prior(disparity: &ScalarMap, d_max: f64, params: &SegParams, seed: u64) -> ScalarMap {
    let (w, h) = disparity.dims();
    let Some(pl) = fit_ground_plane(disparity, seed) else {
        return Grid::new(w, h, 0.0);
    };
    ground_prior_from_plane(disparity, &pl, d_max, params.lambda_gro)
}

pub fn ground_prior_from_plane(disparity: &ScalarMap, plane: &GroundPlane, d_max: f64, lambda: f64) -> ScalarMap {
    let tau = (0.01 * d_max).max(1e-9);
    let (w, h) = disparity.dims();
    Grid::from_fn(w, h, |x, y| {
        let d = disparity.get(x, y);
        if !d.is_finite() {
            return 0.0;
        }
        let r = (d - plane.at(x as f64, y as f64)).abs();
        lambda * (r.min(tau) / tau - 1.0)
    })
}

// ---------------------------------------------------------------------------
// Potts weights

/// Image edge strength in [0, 1], used by the structure edge weight.
pub trait EdgeDetector {
    fn detect(&self, img: &ColorImage) -> ScalarMap;
}

/// Sobel gradient magnitude normalized by its 99th percentile.
#[derive(Clone, Copy, Debug, Default)]
pub struct SobelEdges;

impl EdgeDetector for SobelEdges {
    fn detect(&self, img: &ColorImage) -> ScalarMap {
        let g = img.to_gray();
        let (w, h) = g.dims();
        let at = |x: usize, y: usize, dx: isize, dy: isize| g.get_clamped(x as isize + dx, y as isize + dy);
        let mag = Grid::from_fn(w, h, |x, y| {
            let gx = at(x, y, 1, -1) + 2.0 * at(x, y, 1, 0) + at(x, y, 1, 1)
                - at(x, y, -1, -1)
                - 2.0 * at(x, y, -1, 0)
                - at(x, y, -1, 1);
            let gy = at(x, y, -1, 1) + 2.0 * at(x, y, 0, 1) + at(x, y, 1, 1)
                - at(x, y, -1, -1)
                - 2.0 * at(x, y, 0, -1)
                - at(x, y, 1, -1);
            gx.hypot(gy)
        });
        let mut sorted: Vec<f64> = mag.iter().cloned().collect();
        sorted.sort_by(f64::total_cmp);
        let p99 = sorted[((sorted.len() - 1) as f64 * 0.99).round() as usize];
        if p99 <= 1e-9 {
            return Grid::new(w, h, 0.0);
        }
        mag.map(|v| (v / p99).min(1.0))
    }
}

/// The three edge-weight families and their contrast scales.
#[derive(Clone, Debug)]
pub struct PottsWeights {
    pub color: EdgeWeightMap,
    pub depth: EdgeWeightMap,
    pub structure: EdgeWeightMap,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl PottsWeights {
    /// `lambda_potts * (w_col + w_dep + w_str)`.
    pub fn total(&self, lambda_potts: f64) -> EdgeWeightMap {
        self.color.add(&self.depth).add(&self.structure).scaled(lambda_potts)
    }
}

/// Absolute 4-neighbor Laplacian of the disparity; invalid pixels count as 0.
pub fn disparity_laplacian(d: &ScalarMap) -> ScalarMap {
    let (w, h) = d.dims();
    let v = |x: isize, y: isize| {
        let s = d.get_clamped(x, y);
        if s.is_finite() {
            s
        } else {
            0.0
        }
    };
    Grid::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        (v(x - 1, y) + v(x + 1, y) + v(x, y - 1) + v(x, y + 1) - 4.0 * v(x, y)).abs()
    })
}

pub fn potts_weights(img: &ColorImage, disparity: &ScalarMap, edges: &ScalarMap, kappa3: f64) -> PottsWeights {
    let (w, h) = img.dims();
    let d2 = |a: &[f64; 3], b: &[f64; 3]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
    let kappa1 = (2.0 * neighbor_mean(w, h, |p, q| d2(&img[p], &img[q]))).max(KAPPA_FLOOR);
    let lap = disparity_laplacian(disparity);
    let kappa2 = (2.0 * neighbor_mean(w, h, |p, q| lap[p] + lap[q])).max(KAPPA_FLOOR);
    PottsWeights {
        color: EdgeWeightMap::from_fn(w, h, |p, q| (-d2(&img[p], &img[q]) / kappa1).exp()),
        depth: EdgeWeightMap::from_fn(w, h, |p, q| (-(lap[p] + lap[q]) / kappa2).exp()),
        structure: EdgeWeightMap::from_fn(w, h, |p, q| (-(edges[p] + edges[q]).abs() / kappa3).exp()),
        kappa1,
        kappa2,
    }
}

// ---------------------------------------------------------------------------
// Superpixels

const SLIC_COMPACTNESS: f64 = 0.1;
const SLIC_ITERATIONS: usize = 10;

/// SLIC-style clustering in RGB + position into about `count` segments.
/// Labels are dense in `0..n`.
pub fn superpixels(img: &ColorImage, count: usize) -> Grid<u32> {
    let (w, h) = img.dims();
    let step = ((w * h) as f64 / count.max(1) as f64).sqrt().max(1.0);
    let gray = img.to_gray();
    // Seeds on a regular grid, moved to the lowest gradient in a 3x3 window.
    let mut centers: Vec<([f64; 3], f64, f64)> = Vec::new();
    let mut y = step / 2.0;
    while y < h as f64 {
        let mut x = step / 2.0;
        while x < w as f64 {
            let (cx, cy) = (x as isize, y as isize);
            let mut best = (f64::INFINITY, cx, cy);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (qx, qy) = (cx + dx, cy + dy);
                    if !gray.contains(qx, qy) {
                        continue;
                    }
                    let g = (gray.get_clamped(qx + 1, qy) - gray.get_clamped(qx - 1, qy)).powi(2)
                        + (gray.get_clamped(qx, qy + 1) - gray.get_clamped(qx, qy - 1)).powi(2);
                    if g < best.0 {
                        best = (g, qx, qy);
                    }
                }
            }
            let (bx, by) = (best.1 as usize, best.2 as usize);
            centers.push((img.get(bx, by), bx as f64, by as f64));
            x += step;
        }
        y += step;
    }
    let spatial = SLIC_COMPACTNESS * SLIC_COMPACTNESS / (step * step);
    let mut labels = Grid::new(w, h, 0u32);
    for _ in 0..SLIC_ITERATIONS {
        let mut dist = Grid::new(w, h, f64::INFINITY);
        for (k, (c, cx, cy)) in centers.iter().enumerate() {
            let x0 = (cx - 2.0 * step).floor().max(0.0) as usize;
            let x1 = ((cx + 2.0 * step).ceil() as usize).min(w - 1);
            let y0 = (cy - 2.0 * step).floor().max(0.0) as usize;
            let y1 = ((cy + 2.0 * step).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = img.get(x, y);
                    let dc = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    let ds = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let d = dc + spatial * ds;
                    if d < dist.get(x, y) {
                        dist.set(x, y, d);
                        labels.set(x, y, k as u32);
                    }
                }
            }
        }
        let mut acc = vec![([0.0; 3], 0.0, 0.0, 0usize); centers.len()];
        for y in 0..h {
            for x in 0..w {
                let a = &mut acc[labels.get(x, y) as usize];
                let p = img.get(x, y);
                (0..3).for_each(|i| a.0[i] += p[i]);
                a.1 += x as f64;
                a.2 += y as f64;
                a.3 += 1;
            }
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                *c = (a.0.map(|v| v / n), a.1 / n, a.2 / n);
            }
        }
    }
    // Compact the label range.
    let mut remap = vec![u32::MAX; centers.len()];
    let mut next = 0u32;
    labels.map(|&l| {
        let r = &mut remap[l as usize];
        if *r == u32::MAX {
            *r = next;
            next += 1;
        }
        *r
    })
}

/// Replace every value by the mean over its segment.
pub fn smooth_costs(costs: &ScalarMap, labels: &Grid<u32>) -> ScalarMap {
    let n = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for (&c, &l) in costs.iter().zip(labels.iter()) {
        sum[l as usize] += c;
        cnt[l as usize] += 1;
    }
    labels.map(|&l| sum[l as usize] / cnt[l as usize] as f64)
}

// ---------------------------------------------------------------------------
// Prior flow

const BLOCK_RADIUS: isize = 4;
const BLOCK_SEARCH: i32 = 4;
const PRIOR_LEVELS: usize = 3;
const PRIOR_CHECK_TOLERANCE: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct PriorFlow {
    pub flow: VectorMap,
    /// Passed the forward-backward consistency check.
    pub valid: MaskMap,
}

/// Edge-replicated copy with a `BLOCK_RADIUS` border.
fn pad_block(img: &GrayImage) -> GrayImage {
    let (w, h) = img.dims();
    let r = BLOCK_RADIUS;
    Grid::from_fn(w + 2 * r as usize, h + 2 * r as usize, |x, y| img.get_clamped(x as isize - r, y as isize - r))
}

/// SSD of the blocks centered at `(x, y)` of `a` and `(qx, qy)` of `b`
/// (padded images, unpadded coordinates). Stops once the partial sum
/// exceeds `bound`.
fn block_ssd(a: &GrayImage, x: usize, y: usize, b: &GrayImage, qx: usize, qy: usize, bound: f64) -> f64 {
    let side = 2 * BLOCK_RADIUS as usize + 1;
    let mut s = 0.0;
    for dy in 0..side {
        let ra = &a.row(y + dy)[x..x + side];
        let rb = &b.row(qy + dy)[qx..qx + side];
        for (va, vb) in ra.iter().zip(rb) {
            let d = va - vb;
            s += d * d;
        }
        if s > bound {
            break;
        }
    }
    s
}

fn parabola(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if den > 0.0 {
        (0.5 * (l - r) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

fn match_level(a: &GrayImage, b: &GrayImage, init: Option<&VectorMap>) -> VectorMap {
    let (w, h) = a.dims();
    let (pa, pb) = (pad_block(a), pad_block(b));
    Grid::par_from_fn(w, h, |x, y| {
        let guess = init.map_or(Vector2::zeros(), |f| {
            let v = f.get((x / 2).min(f.width() - 1), (y / 2).min(f.height() - 1));
            2.0 * v
        });
        let (gu, gv) = (guess.x.round() as i32, guess.y.round() as i32);
        let (xi, yi) = (x as isize, y as isize);
        let mut best = (f64::INFINITY, gu, gv);
        for v in gv - BLOCK_SEARCH..=gv + BLOCK_SEARCH {
            for u in gu - BLOCK_SEARCH..=gu + BLOCK_SEARCH {
                let (qx, qy) = (xi + u as isize, yi + v as isize);
                if !b.contains(qx, qy) {
                    continue;
                }
                let c = block_ssd(&pa, x, y, &pb, qx as usize, qy as usize, best.0);
                // Ties go to the smaller displacement.
                if c < best.0 || (c == best.0 && u * u + v * v < best.1 * best.1 + best.2 * best.2) {
                    best = (c, u, v);
                }
            }
        }
        if !best.0.is_finite() {
            return guess;
        }
        let (c, u, v) = best;
        if c == 0.0 {
            return Vector2::new(u as f64, v as f64);
        }
        let (qx, qy) = (xi + u as isize, yi + v as isize);
        let cost = |dx: isize, dy: isize| block_ssd(&pa, x, y, &pb, (qx + dx) as usize, (qy + dy) as usize, f64::INFINITY);
        let ou = if b.contains(qx - 1, qy) && b.contains(qx + 1, qy) {
            parabola(cost(-1, 0), c, cost(1, 0))
        } else {
            0.0
        };
        let ov = if b.contains(qx, qy - 1) && b.contains(qx, qy + 1) {
            parabola(cost(0, -1), c, cost(0, 1))
        } else {
            0.0
        };
        Vector2::new(u as f64 + ou, v as f64 + ov)
    })
}

fn gray_pyramid(img: &GrayImage, levels: usize) -> Vec<GrayImage> {
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let prev = binomial_blur(out.last().unwrap());
        let (w, h) = ((prev.width() / 2).max(1), (prev.height() / 2).max(1));
        out.push(resize_scalar(&prev, w, h));
    }
    out
}

/// Coarse-to-fine block matching from `a` to `b`.
pub fn block_flow(a: &GrayImage, b: &GrayImage) -> VectorMap {
    let pa = gray_pyramid(a, PRIOR_LEVELS);
    let pb = gray_pyramid(b, PRIOR_LEVELS);
    let mut flow: Option<VectorMap> = None;
    for level in (0..PRIOR_LEVELS).rev() {
        flow = Some(match_level(&pa[level], &pb[level], flow.as_ref()));
    }
    flow.unwrap()
}

/// Forward flow with `|F(p) + B(p + F(p))| <= tol` as validity.
pub fn consistency_check(forward: &VectorMap, backward: &VectorMap, tol: f64) -> MaskMap {
    let (w, h) = forward.dims();
    Grid::from_fn(w, h, |x, y| {
        let f = forward.get(x, y);
        if !f.x.is_finite() || !f.y.is_finite() {
            return false;
        }
        let (qx, qy) = ((x as f64 + f.x).round() as isize, (y as f64 + f.y).round() as isize);
        if !backward.contains(qx, qy) {
            return false;
        }
        let b = backward.get(qx as usize, qy as usize);
        b.x.is_finite() && (f + b).norm() <= tol
    })
}

/// Dense prior flow from `a` to `b` with a bi-directional check.
pub fn prior_flow(a: &GrayImage, b: &GrayImage) -> PriorFlow {
    let (flow, back) = rayon::join(|| block_flow(a, b), || block_flow(b, a));
    let valid = consistency_check(&flow, &back, PRIOR_CHECK_TOLERANCE);
    PriorFlow { flow, valid }
}

// ---------------------------------------------------------------------------
// Alternation

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: MaskMap,
    pub model: ColorModel,
    /// Alternation objective after each cut. It equals `E_seg` under the
    /// color model of that cut plus the color model's negative
    /// log-likelihood of the image and its pseudo-count prior, so it does not
    /// increase from one iteration to the next.
    pub energies: Vec<f64>,
    pub iterations: usize,
}

fn model_offset(img: &ColorImage, model: &ColorModel, lambda: f64) -> f64 {
    let pixels: f64 = img.iter().map(|c| -model.fg[color_bin(c)].ln()).sum();
    let prior: f64 = model.bg.iter().zip(&model.fg).map(|(b, f)| -(b.ln() + f.ln())).sum();
    lambda * (pixels + prior)
}

/// GrabCut-style minimization of `sum_p [data_p + C_col_p] (1 - s_p) + Potts`.
///
/// `data` holds every bracketed term except the color term, which is
/// rebuilt from the current labeling between cuts. `seed` initializes the
/// color models.
pub fn segment(
    img: &ColorImage,
    data: &ScalarMap,
    weights: &EdgeWeightMap,
    seed: &MaskMap,
    params: &SegParams,
) -> Result<Segmentation> {
    let mut model = ColorModel::from_mask(img, seed);
    let build = |model: &ColorModel| {
        let unary = Grid::from_fn(data.width(), data.height(), |x, y| {
            data.get(x, y) + params.lambda_col * model.log_ratio(&img.get(x, y))
        });
        BinaryMrf::from_background_costs(&unary, weights.clone())
    };
    let mut mrf = build(&model);
    let mut cut = GraphCut::new(&mrf)?;
    let (mut mask, e) = cut.solve(&mrf);
    let mut energies = vec![e + model_offset(img, &model, params.lambda_col)];
    let mut iterations = 1;
    while iterations < params.max_iterations.max(1) {
        let next_model = ColorModel::from_mask(img, &mask);
        let next_mrf = build(&next_model);
        let (next_mask, e) = cut.resolve(&next_mrf)?;
        iterations += 1;
        let total = e + model_offset(img, &next_model, params.lambda_col);
        model = next_model;
        mrf = next_mrf;
        energies.push(total);
        let unchanged = next_mask == mask;
        mask = next_mask;
        if unchanged {
            break;
        }
    }
    let _ = mrf;
    Ok(Segmentation {
        mask,
        model,
        energies,
        iterations,
    })
}

/// Foreground seed for the first color models: positive appearance plus flow
/// evidence.
pub fn initial_seed(ncc: &ScalarMap, flo: &ScalarMap) -> MaskMap {
    Grid::from_fn(ncc.width(), ncc.height(), |x, y| ncc.get(x, y) + flo.get(x, y) > 0.0)
}
