//! Masked non-rigid optical flow: 2D-label SGM per connected component of
//! the initial segmentation, forward-backward filtering, rigid background
//! filling, geodesic weighted-median hole filling and a final median.

use std::collections::HashMap;

use nalgebra::{Point2, Vector2};
use rayon::prelude::*;

use crate::edges::EdgeWeightMap;
use crate::grid::{GrayImage, Grid, MaskMap, ScalarMap, VectorMap, NEIGHBORS_8};
use crate::matching::{flow_cost_volume, FlowRange};
use crate::odometry::{detect_corners, match_corners, refine_match};
use crate::sgm::{self, SgmParams};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    /// TNCC truncation.
    pub tau: f64,
    pub sgm: SgmParams,
    /// Forward-backward tolerance in pixels.
    pub check_tolerance: f64,
    pub kappa_geo: f64,
    /// Side of the weighted-median window.
    pub wm_window: usize,
    /// Side of the final plain median window.
    pub median_window: usize,
    /// Largest allowed side of the label range.
    pub max_range_side: usize,
    pub bin_width: f64,
    pub padding: i32,
    /// Half-width of the range used when no source gives one.
    pub fallback_range: i32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            tau: 1.0,
            sgm: SgmParams::default(),
            check_tolerance: 1.0,
            kappa_geo: 2.0,
            wm_window: 31,
            median_window: 5,
            max_range_side: 241,
            bin_width: 2.0,
            padding: 2,
            fallback_range: 16,
        }
    }
}

/// Sparse displacement observed at a pixel of the reference image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureMatch {
    pub at: Point2<f64>,
    pub displacement: Vector2<f64>,
}

/// Corner matches between two frames, for range estimation.
pub fn feature_matches(a: &GrayImage, b: &GrayImage) -> Vec<FeatureMatch> {
    let ca = detect_corners(a, 400);
    let cb = detect_corners(b, 400);
    let radius = (0.15 * a.width().max(a.height()) as f64).max(16.0);
    match_corners(a, &ca, b, &cb, radius, 0.8)
        .into_iter()
        .map(|(p, q)| {
            let at = Point2::new(p.0 as f64, p.1 as f64);
            let r = refine_match(a, p, b, q);
            FeatureMatch {
                at,
                displacement: r - at,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Connected components

/// 8-connected components of `mask`, labeled `0..n` in raster order of
/// their first pixel.
pub fn connected_components(mask: &MaskMap) -> (Grid<Option<u32>>, usize) {
    let (w, h) = mask.dims();
    let mut labels: Grid<Option<u32>> = Grid::new(w, h, None);
    let mut n = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) || labels.get(x, y).is_some() {
                continue;
            }
            labels.set(x, y, Some(n));
            stack.push((x, y));
            while let Some((px, py)) = stack.pop() {
                for (dx, dy) in NEIGHBORS_8 {
                    let (qx, qy) = (px as isize + dx, py as isize + dy);
                    if mask.contains(qx, qy) {
                        let (qx, qy) = (qx as usize, qy as usize);
                        if mask.get(qx, qy) && labels.get(qx, qy).is_none() {
                            labels.set(qx, qy, Some(n));
                            stack.push((qx, qy));
                        }
                    }
                }
            }
            n += 1;
        }
    }
    (labels, n as usize)
}

/// One mask per connected component.
pub fn component_masks(mask: &MaskMap) -> Vec<MaskMap> {
    let (labels, n) = connected_components(mask);
    (0..n as u32)
        .map(|k| labels.map(|&l| l == Some(k)))
        .collect()
}

// ---------------------------------------------------------------------------
// Search range

/// Bounding box of the 2D-histogram bins holding at least a tenth of the
/// fullest bin's count.
pub fn histogram_range(vectors: impl IntoIterator<Item = Vector2<f64>>, bin: f64) -> Option<FlowRange> {
    let mut hist: HashMap<(i64, i64), usize> = HashMap::new();
    for v in vectors {
        if v.x.is_finite() && v.y.is_finite() {
            *hist.entry(((v.x / bin).floor() as i64, (v.y / bin).floor() as i64)).or_default() += 1;
        }
    }
    let top = *hist.values().max()?;
    let kept: Vec<(i64, i64)> = hist
        .into_iter()
        .filter(|&(_, c)| c * 10 >= top)
        .map(|(k, _)| k)
        .collect();
    let lo = |f: fn(&(i64, i64)) -> i64| kept.iter().map(f).min().unwrap();
    let hi = |f: fn(&(i64, i64)) -> i64| kept.iter().map(f).max().unwrap();
    Some(FlowRange::new(
        (lo(|k| k.0) as f64 * bin).floor() as i32,
        ((hi(|k| k.0) + 1) as f64 * bin).ceil() as i32,
        (lo(|k| k.1) as f64 * bin).floor() as i32,
        ((hi(|k| k.1) + 1) as f64 * bin).ceil() as i32,
    ))
}

/// Range covering the sparse matches inside the component and the pruned
/// histograms of the prior and rigid flows over it, padded.
pub fn estimate_range(
    component: &MaskMap,
    features: &[FeatureMatch],
    prior: Option<(&VectorMap, &MaskMap)>,
    rigid: &VectorMap,
    params: &FlowParams,
) -> FlowRange {
    let inside = |p: &Point2<f64>| {
        let (x, y) = (p.x.round() as isize, p.y.round() as isize);
        component.contains(x, y) && component.get(x as usize, y as usize)
    };
    let feats: Vec<Vector2<f64>> = features.iter().filter(|f| inside(&f.at)).map(|f| f.displacement).collect();
    let mut ranges = Vec::new();
    if !feats.is_empty() {
        ranges.push(FlowRange::new(
            feats.iter().map(|v| v.x.floor() as i32).min().unwrap(),
            feats.iter().map(|v| v.x.ceil() as i32).max().unwrap(),
            feats.iter().map(|v| v.y.floor() as i32).min().unwrap(),
            feats.iter().map(|v| v.y.ceil() as i32).max().unwrap(),
        ));
    }
    let pixels = || {
        (0..component.height())
            .flat_map(|y| (0..component.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| component.get(x, y))
    };
    if let Some((flow, valid)) = prior {
        ranges.extend(histogram_range(
            pixels().filter(|&(x, y)| valid.get(x, y)).map(|(x, y)| flow.get(x, y)),
            params.bin_width,
        ));
    }
    ranges.extend(histogram_range(pixels().map(|(x, y)| rigid.get(x, y)), params.bin_width));
    let Some(first) = ranges.first().copied() else {
        let r = params.fallback_range;
        return FlowRange::new(-r, r, -r, r);
    };
    let united = ranges.iter().fold(first, |acc, r| acc.union(r)).padded(params.padding);
    cap_range(&united, params.max_range_side)
}

/// Shrink each axis about its center to at most `side` labels.
pub fn cap_range(r: &FlowRange, side: usize) -> FlowRange {
    let fit = |lo: i32, hi: i32| {
        let n = (hi - lo + 1) as usize;
        if n <= side {
            return (lo, hi);
        }
        let c = (lo + hi) / 2;
        let half = (side as i32 - 1) / 2;
        (c - half, c - half + side as i32 - 1)
    };
    let (u0, u1) = fit(r.u_min, r.u_max);
    let (v0, v1) = fit(r.v_min, r.v_max);
    FlowRange::new(u0, u1, v0, v1)
}

// ---------------------------------------------------------------------------
// Filters

/// Weights `exp(-d_pq / kappa)` over the window of half-size `radius` around
/// `center`, clamped to the image. `d_pq` is a two-pass chamfer
/// approximation of the geodesic distance with step cost
/// `|D(a) - D(b)| + |a - b| / 100`.
#[derive(Clone, Debug)]
pub struct GeodesicKernel {
    pub origin: (usize, usize),
    pub weights: ScalarMap,
}

pub fn geodesic_kernel(d: &ScalarMap, center: (usize, usize), radius: usize, kappa: f64) -> GeodesicKernel {
    let (w, h) = d.dims();
    let x0 = center.0.saturating_sub(radius);
    let y0 = center.1.saturating_sub(radius);
    let x1 = (center.0 + radius).min(w - 1);
    let y1 = (center.1 + radius).min(h - 1);
    let (kw, kh) = (x1 - x0 + 1, y1 - y0 + 1);
    let val = |x: usize, y: usize| d.get(x + x0, y + y0);
    let step = |a: (usize, usize), b: (usize, usize)| {
        let (da, db) = (val(a.0, a.1), val(b.0, b.1));
        let dd = if da.is_finite() && db.is_finite() { (da - db).abs() } else { 0.0 };
        let len = if a.0 != b.0 && a.1 != b.1 { std::f64::consts::SQRT_2 } else { 1.0 };
        dd + len / 100.0
    };
    let mut dist = Grid::new(kw, kh, f64::INFINITY);
    dist.set(center.0 - x0, center.1 - y0, 0.0);
    let relax = |dist: &mut Grid<f64>, x: usize, y: usize, nbrs: &[(isize, isize)]| {
        let mut best = dist.get(x, y);
        for &(dx, dy) in nbrs {
            let (qx, qy) = (x as isize + dx, y as isize + dy);
            if dist.contains(qx, qy) {
                let (qx, qy) = (qx as usize, qy as usize);
                best = best.min(dist.get(qx, qy) + step((qx, qy), (x, y)));
            }
        }
        dist.set(x, y, best);
    };
    let forward = [(-1, 0), (-1, -1), (0, -1), (1, -1)];
    let backward = [(1, 0), (1, 1), (0, 1), (-1, 1)];
    for y in 0..kh {
        for x in 0..kw {
            relax(&mut dist, x, y, &forward);
        }
    }
    for y in (0..kh).rev() {
        for x in (0..kw).rev() {
            relax(&mut dist, x, y, &backward);
        }
    }
    GeodesicKernel {
        origin: (x0, y0),
        weights: dist.map(|&v| (-v / kappa).exp()),
    }
}

/// Lower weighted median: the smallest value whose cumulative weight reaches
/// half the total. `None` without positive weight.
pub fn weighted_median(mut items: Vec<(f64, f64)>) -> Option<f64> {
    items.retain(|(v, w)| v.is_finite() && *w > 0.0);
    if items.is_empty() {
        return None;
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = items.iter().map(|i| i.1).sum();
    let mut acc = 0.0;
    for (v, w) in &items {
        acc += w;
        if acc >= 0.5 * total {
            return Some(*v);
        }
    }
    items.last().map(|i| i.0)
}

/// Fill every `holes` pixel with the componentwise geodesic weighted median
/// of the non-hole vectors in its window.
pub fn fill_holes(flow: &VectorMap, holes: &MaskMap, guide: &ScalarMap, params: &FlowParams) -> VectorMap {
    let (w, h) = flow.dims();
    let radius = params.wm_window / 2;
    let filled: Vec<((usize, usize), Vector2<f64>)> = (0..w * h)
        .into_par_iter()
        .filter(|&i| holes.data()[i])
        .filter_map(|i| {
            let (x, y) = (i % w, i / w);
            let k = geodesic_kernel(guide, (x, y), radius, params.kappa_geo);
            let mut us = Vec::new();
            let mut vs = Vec::new();
            for ky in 0..k.weights.height() {
                for kx in 0..k.weights.width() {
                    let (qx, qy) = (kx + k.origin.0, ky + k.origin.1);
                    let f = flow.get(qx, qy);
                    if holes.get(qx, qy) || !f.x.is_finite() || !f.y.is_finite() {
                        continue;
                    }
                    let wt = k.weights.get(kx, ky);
                    us.push((f.x, wt));
                    vs.push((f.y, wt));
                }
            }
            Some(((x, y), Vector2::new(weighted_median(us)?, weighted_median(vs)?)))
        })
        .collect();
    let mut out = flow.clone();
    for ((x, y), v) in filled {
        out.set(x, y, v);
    }
    out
}

/// Componentwise plain median over a square window, applied where `mask`.
pub fn median_filter(flow: &VectorMap, mask: &MaskMap, window: usize) -> VectorMap {
    let r = (window / 2) as isize;
    let (w, h) = flow.dims();
    Grid::par_from_fn(w, h, |x, y| {
        let f = flow.get(x, y);
        if !mask.get(x, y) {
            return f;
        }
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let (qx, qy) = (x as isize + dx, y as isize + dy);
                if !flow.contains(qx, qy) {
                    continue;
                }
                let g = flow.get(qx as usize, qy as usize);
                if g.x.is_finite() && g.y.is_finite() {
                    us.push((g.x, 1.0));
                    vs.push((g.y, 1.0));
                }
            }
        }
        match (weighted_median(us), weighted_median(vs)) {
            (Some(u), Some(v)) => Vector2::new(u, v),
            _ => f,
        }
    })
}

// ---------------------------------------------------------------------------
// Non-rigid flow

#[derive(Clone, Debug)]
pub struct NonRigidFlow {
    /// Flow on the mask after filtering; `NaN` elsewhere.
    pub flow: VectorMap,
    /// Mask pixels whose SGM vector passed the forward-backward check.
    pub consistent: MaskMap,
    /// Label range used for each component.
    pub ranges: Vec<FlowRange>,
}

impl NonRigidFlow {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            flow: Grid::new(width, height, Vector2::new(f64::NAN, f64::NAN)),
            consistent: Grid::new(width, height, false),
            ranges: Vec::new(),
        }
    }
}

/// SGM flow from `a` to `b` over `mask` with labels in `range`, in image
/// coordinates; `NaN` outside the mask.
pub fn sgm_flow(
    a: &GrayImage,
    b: &GrayImage,
    mask: &MaskMap,
    range: &FlowRange,
    edges: Option<&EdgeWeightMap>,
    params: &FlowParams,
) -> VectorMap {
    let (w, h) = a.dims();
    let mut out = Grid::new(w, h, Vector2::new(f64::NAN, f64::NAN));
    let Some(vol) = flow_cost_volume(a, b, range, params.tau, mask) else {
        return out;
    };
    let res = sgm::solve(&vol, &params.sgm, edges);
    let (ox, oy) = res.origin;
    for y in 0..vol.height {
        for x in 0..vol.width {
            if let Some(v) = res.refined(x, y) {
                out.set(x + ox, y + oy, v);
            }
        }
    }
    out
}

/// Nearest-pixel forward splat of `mask` by `flow`, closed by one pixel.
pub fn warp_mask(mask: &MaskMap, flow: &VectorMap) -> MaskMap {
    let (w, h) = mask.dims();
    let mut out = Grid::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let f = flow.get(x, y);
            if !mask.get(x, y) || !f.x.is_finite() || !f.y.is_finite() {
                continue;
            }
            let (qx, qy) = ((x as f64 + f.x).round() as isize, (y as f64 + f.y).round() as isize);
            if out.contains(qx, qy) {
                out.set(qx as usize, qy as usize, true);
            }
        }
    }
    out.dilate(1)
}

/// `|F(p) + B(p + F(p))| <= tol` on the mask.
pub fn forward_backward_check(forward: &VectorMap, backward: &VectorMap, mask: &MaskMap, tol: f64) -> MaskMap {
    let (w, h) = forward.dims();
    Grid::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        let f = forward.get(x, y);
        if !f.x.is_finite() || !f.y.is_finite() {
            return false;
        }
        let (qx, qy) = ((x as f64 + f.x).round() as isize, (y as f64 + f.y).round() as isize);
        if !backward.contains(qx, qy) {
            return false;
        }
        let b = backward.get(qx as usize, qy as usize);
        b.x.is_finite() && b.y.is_finite() && (f + b).norm() <= tol
    })
}

/// Inputs of [`nonrigid_flow`] besides the two images.
pub struct FlowInputs<'a> {
    pub mask: &'a MaskMap,
    pub rigid: &'a VectorMap,
    pub disparity: &'a ScalarMap,
    pub features: &'a [FeatureMatch],
    pub prior: Option<(&'a VectorMap, &'a MaskMap)>,
    /// Color edge weights of `a` and `b` for the SGM penalty.
    pub edges: (Option<&'a EdgeWeightMap>, Option<&'a EdgeWeightMap>),
}

/// Non-rigid flow proposal on `inputs.mask`.
pub fn nonrigid_flow(a: &GrayImage, b: &GrayImage, inputs: &FlowInputs, params: &FlowParams) -> NonRigidFlow {
    let (w, h) = a.dims();
    if !inputs.mask.any() {
        return NonRigidFlow::empty(w, h);
    }
    let comps = component_masks(inputs.mask);
    let solved: Vec<(MaskMap, VectorMap, MaskMap, FlowRange)> = comps
        .into_par_iter()
        .map(|comp| {
            let range = estimate_range(&comp, inputs.features, inputs.prior, inputs.rigid, params);
            let fwd = sgm_flow(a, b, &comp, &range, inputs.edges.0, params);
            let next_mask = warp_mask(&comp, &fwd);
            let bwd = sgm_flow(b, a, &next_mask, &range.reversed(), inputs.edges.1, params);
            let ok = forward_backward_check(&fwd, &bwd, &comp, params.check_tolerance);
            (comp, fwd, ok, range)
        })
        .collect();
    // Background filled with the rigid flow; consistent vectors on the mask.
    let mut flow = inputs.rigid.clone();
    let mut consistent = Grid::new(w, h, false);
    let mut ranges = Vec::with_capacity(solved.len());
    for (comp, fwd, ok, range) in solved {
        for i in 0..w * h {
            if comp.data()[i] {
                flow.data_mut()[i] = fwd.data()[i];
                consistent.data_mut()[i] = ok.data()[i];
            }
        }
        ranges.push(range);
    }
    let holes = Grid::from_fn(w, h, |x, y| inputs.mask.get(x, y) && !consistent.get(x, y));
    let filled = fill_holes(&flow, &holes, inputs.disparity, params);
    let smoothed = median_filter(&filled, inputs.mask, params.median_window);
    let flow = Grid::from_fn(w, h, |x, y| {
        if inputs.mask.get(x, y) {
            smoothed.get(x, y)
        } else {
            Vector2::new(f64::NAN, f64::NAN)
        }
    });
    NonRigidFlow {
        flow,
        consistent,
        ranges,
    }
}
