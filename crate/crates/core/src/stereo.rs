//! Binocular SGM stereo, left-right occlusion check, disparity-range
//! reduction and multi-frame epipolar refinement.

use crate::edges::EdgeWeightMap;
use crate::geometry::{Pose, StereoRig};
use crate::grid::{GrayImage, Grid, MaskMap, ScalarMap};
use crate::matching::{pose_cost_volume, stereo_cost_volume, stereo_cost_volume_right, CostVolume, PatchStats};
use crate::sgm::{self, SgmParams, FIXED_SCALE};

#[derive(Clone, Debug, PartialEq)]
pub struct StereoParams {
    pub max_disparity: usize,
    /// TNCC cap of the binocular cost.
    pub tau: f64,
    pub lr_tolerance: f64,
    pub sgm: SgmParams,
}

impl Default for StereoParams {
    fn default() -> Self {
        Self {
            max_disparity: 128,
            tau: 1.0,
            lr_tolerance: 1.0,
            sgm: SgmParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpipolarParams {
    /// TNCC cap of the temporal costs and of left-right costs at occluded pixels.
    pub tau: f64,
    /// Confidence threshold on the normalized uncertainty.
    pub tau_c: f64,
    /// Uncertainty normalizer, in cost units.
    pub tau_u: f64,
}

impl Default for EpipolarParams {
    fn default() -> Self {
        Self {
            tau: 0.25,
            tau_c: 0.1,
            tau_u: 2000.0 / FIXED_SCALE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StereoOutput {
    /// Subpixel disparity, defined at every pixel.
    pub disparity: ScalarMap,
    /// `true` where the left-right check fails.
    pub occlusion: MaskMap,
    /// Non-negative; infinite where the left patch carries no texture.
    pub uncertainty: ScalarMap,
    pub max_disparity: usize,
    /// Left-reference matching cost `C_p(d)` the labeling was computed from.
    pub cost: CostVolume,
}

impl StereoOutput {
    /// The same result with its cost volume cut to `[0, max]`, for the
    /// stages after range reduction.
    pub fn with_range(&self, max: usize) -> StereoOutput {
        let max = max.min(self.max_disparity);
        StereoOutput {
            cost: self.cost.truncated_to(max),
            max_disparity: max,
            ..self.clone()
        }
    }
}

/// Edge weights of the left and right views, used to modulate P2.
#[derive(Clone, Copy, Debug, Default)]
pub struct ViewEdges<'a> {
    pub left: Option<&'a EdgeWeightMap>,
    pub right: Option<&'a EdgeWeightMap>,
}

pub fn binocular(left: &GrayImage, right: &GrayImage, params: &StereoParams, edges: ViewEdges) -> StereoOutput {
    assert!(left.same_dims(right), "stereo pair must share dimensions");
    let cost = stereo_cost_volume(left, right, params.max_disparity, params.tau);
    let lres = sgm::solve(&cost, &params.sgm, edges.left);
    let rcost = stereo_cost_volume_right(left, right, params.max_disparity, params.tau);
    let rres = sgm::solve(&rcost, &params.sgm, edges.right);
    let disparity = lres.disparity_map();
    let occlusion = lr_consistency(
        &lres.integer_disparity_map(),
        &rres.integer_disparity_map(),
        params.lr_tolerance,
    );
    let uncertainty = textureless_to_infinite(left, lres.uncertainty);
    StereoOutput {
        disparity,
        occlusion,
        uncertainty,
        max_disparity: params.max_disparity,
        cost,
    }
}

fn textureless_to_infinite(img: &GrayImage, mut u: ScalarMap) -> ScalarMap {
    let stats = PatchStats::new(img);
    for (v, s) in u.data_mut().iter_mut().zip(stats.std.iter()) {
        if s * s < crate::matching::DEGENERATE_VARIANCE {
            *v = f64::INFINITY;
        }
    }
    u
}

/// Occlusion mask: `p` fails when `|D_l(p) - D_r(p - (D_l(p), 0))| > tol`
/// (target column rounded) or the target leaves the image.
pub fn lr_consistency(d_left: &ScalarMap, d_right: &ScalarMap, tol: f64) -> MaskMap {
    assert!(d_left.same_dims(d_right));
    Grid::par_from_fn(d_left.width(), d_left.height(), |x, y| {
        let d = d_left.get(x, y);
        if !d.is_finite() {
            return true;
        }
        let tx = (x as f64 - d).round();
        if tx < 0.0 || tx >= d_right.width() as f64 {
            return true;
        }
        let dr = d_right.get(tx as usize, y);
        !((d - dr).abs() <= tol)
    })
}

/// Highest unit-width histogram bin of non-occluded disparities holding at
/// least 0.5% of them, capped at `configured_max`.
pub fn reduce_range(disparity: &ScalarMap, occlusion: &MaskMap, configured_max: usize) -> usize {
    let mut hist = vec![0usize; configured_max + 1];
    let mut total = 0usize;
    for (d, &occ) in disparity.iter().zip(occlusion.iter()) {
        if occ || !d.is_finite() {
            continue;
        }
        let bin = (d.round().max(0.0) as usize).min(configured_max);
        hist[bin] += 1;
        total += 1;
    }
    if total == 0 {
        return configured_max;
    }
    // count / total >= 0.5% without rounding.
    hist.iter()
        .rposition(|&c| c * 200 >= total)
        .unwrap_or(configured_max)
}

/// `alpha = max(u - tau_c, 0) / (1 - tau_c)`.
#[inline]
pub fn confidence_alpha(u: f64, tau_c: f64) -> f64 {
    ((u - tau_c).max(0.0) / (1.0 - tau_c)).min(1.0)
}

/// `u = min(U / tau_u, 1)`.
#[inline]
pub fn normalized_uncertainty(uncertainty: f64, tau_u: f64) -> f64 {
    if uncertainty.is_nan() {
        return 1.0;
    }
    (uncertainty / tau_u).min(1.0)
}

/// Linear blend of the binocular and averaged temporal cost.
#[inline]
pub fn blend_cost(binocular: f64, average: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * binocular + alpha * average
}

/// The stereo frame triple around `t`. Poses map points of a frame into the
/// next one: `prev_pose` is `t-1 -> t`, `pose` is `t -> t+1`.
#[derive(Clone, Copy, Debug)]
pub struct EpipolarViews<'a> {
    pub left: &'a GrayImage,
    pub prev: Option<(&'a GrayImage, &'a GrayImage)>,
    pub next: (&'a GrayImage, &'a GrayImage),
    pub prev_pose: Option<&'a Pose>,
    pub pose: &'a Pose,
}

/// Relative poses from the current left view to every temporal target image.
pub fn temporal_targets<'a>(views: &EpipolarViews<'a>, rig: &StereoRig) -> Vec<(&'a GrayImage, Pose)> {
    let lr = rig.left_to_right();
    let mut out = Vec::with_capacity(4);
    if let (Some((l, r)), Some(pp)) = (views.prev, views.prev_pose) {
        let back = pp.inverse();
        out.push((l, back));
        out.push((r, lr.compose(&back)));
    }
    out.push((views.next.0, *views.pose));
    out.push((views.next.1, lr.compose(views.pose)));
    out
}

/// Re-solve the disparity with the binocular cost blended towards the
/// temporal average at uncertain pixels.
pub fn epipolar_refine(
    views: &EpipolarViews,
    rig: &StereoRig,
    binocular: &StereoOutput,
    stereo_params: &StereoParams,
    params: &EpipolarParams,
    edges: Option<&EdgeWeightMap>,
) -> StereoOutput {
    let base = &binocular.cost;
    let (w, h) = (base.width, base.height);
    let u = binocular.uncertainty.map(|&v| normalized_uncertainty(v, params.tau_u));
    let uncertain = u.map(|&v| v > params.tau_c);
    let targets = temporal_targets(views, rig);
    let volumes: Vec<CostVolume> = targets
        .iter()
        .map(|(img, pose)| {
            pose_cost_volume(
                views.left,
                img,
                binocular.max_disparity,
                rig,
                pose,
                params.tau,
                Some(&uncertain),
            )
        })
        .collect();
    let n = base.labels.count();
    let inv = 1.0 / volumes.len() as f64;
    let mut blended = base.clone();
    let data = blended.data_mut();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let occluded = binocular.occlusion.get(x, y);
            let alpha = if uncertain.data()[p] {
                confidence_alpha(u.data()[p], params.tau_c)
            } else {
                0.0
            };
            for l in 0..n {
                let mut c = data[p * n + l] as f64;
                if occluded {
                    c = c.min(params.tau);
                }
                if alpha > 0.0 {
                    let avg = volumes.iter().map(|v| v.cost(x, y, l) as f64).sum::<f64>() * inv;
                    c = blend_cost(c, avg, alpha);
                }
                data[p * n + l] = c as f32;
            }
        }
    }
    let res = sgm::solve(&blended, &stereo_params.sgm, edges);
    StereoOutput {
        disparity: res.disparity_map(),
        occlusion: binocular.occlusion.clone(),
        uncertainty: textureless_to_infinite(views.left, res.uncertainty),
        max_disparity: binocular.max_disparity,
        cost: blended,
    }
}
