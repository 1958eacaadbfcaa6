//! Direct stereo visual odometry.
//!
//! The camera motion `P` maps points of frame `t` into frame `t+1`. It is
//! estimated by robust (Tukey) IRLS alignment of `I_t` against `I_{t+1}` in
//! the inverse-compositional form, coarse to fine, from several initial
//! hypotheses; the refined hypothesis with the lowest weighted TNCC residual
//! wins.

use nalgebra::{Complex, DMatrix, Matrix3, Matrix6, Point2, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::{Pose, StereoRig};
use crate::grid::{binomial_blur, resize_nearest, resize_scalar, GrayImage, Grid, MaskMap, ScalarMap};
use crate::matching::tncc;

/// Tukey tuning constant in units of the residual scale.
pub const TUKEY_C: f64 = 4.685;
/// Base weight of pixels predicted to be on a moving object.
pub const MOVING_WEIGHT: f64 = 1.0 / 8.0;
const MIN_SIGMA: f64 = 1e-3;
const MIN_DISPARITY: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct VoParams {
    pub levels: usize,
    pub max_iterations: usize,
    pub min_step: f64,
    pub max_halvings: usize,
    /// TNCC cap used for hypothesis scoring.
    pub tau: f64,
    pub ransac_iterations: usize,
    pub ransac_threshold: f64,
    pub min_inliers: usize,
    /// Number of forward-translation hypotheses; 0 disables them.
    pub forward_candidates: usize,
    pub seed: u64,
}

impl Default for VoParams {
    fn default() -> Self {
        Self {
            levels: 3,
            max_iterations: 50,
            min_step: 1e-6,
            max_halvings: 8,
            tau: 1.0,
            ransac_iterations: 200,
            ransac_threshold: 2.0,
            min_inliers: 10,
            forward_candidates: 0,
            seed: 0,
        }
    }
}

/// Tukey bi-weight loss with `k = TUKEY_C * sigma`.
pub fn tukey_rho(r: f64, sigma: f64) -> f64 {
    let k = TUKEY_C * sigma;
    let plateau = k * k / 6.0;
    if r.abs() >= k {
        return plateau;
    }
    let a = 1.0 - (r / k).powi(2);
    plateau * (1.0 - a * a * a)
}

/// IRLS weight `rho'(r) / r`.
pub fn tukey_weight(r: f64, sigma: f64) -> f64 {
    let k = TUKEY_C * sigma;
    if r.abs() >= k {
        return 0.0;
    }
    let a = 1.0 - (r / k).powi(2);
    a * a
}

/// Robust scale `1.4826 * MAD`.
pub fn mad_sigma(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return MIN_SIGMA;
    }
    let med = median(residuals.to_vec());
    let dev: Vec<f64> = residuals.iter().map(|r| (r - med).abs()).collect();
    (1.4826 * median(dev)).max(MIN_SIGMA)
}

fn median(mut v: Vec<f64>) -> f64 {
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// 0 at occluded pixels, `1/8` where a moving object is predicted, 1 elsewhere.
pub fn base_weights(occlusion: &MaskMap, moving: Option<&MaskMap>) -> ScalarMap {
    Grid::from_fn(occlusion.width(), occlusion.height(), |x, y| {
        if occlusion.get(x, y) {
            0.0
        } else if moving.is_some_and(|m| m.get(x, y)) {
            MOVING_WEIGHT
        } else {
            1.0
        }
    })
}

/// Every second pixel in both axes with usable disparity, non-zero weight and
/// gradient magnitude above the median over those candidates.
pub fn target_pixels(img: &GrayImage, disparity: &ScalarMap, weights: &ScalarMap) -> Vec<(usize, usize)> {
    let (gx, gy) = img.gradients();
    let mut cand = Vec::new();
    for y in (0..img.height()).step_by(2) {
        for x in (0..img.width()).step_by(2) {
            let d = disparity.get(x, y);
            if d.is_finite() && d > MIN_DISPARITY && weights.get(x, y) > 0.0 {
                cand.push(((x, y), gx.get(x, y).hypot(gy.get(x, y))));
            }
        }
    }
    if cand.is_empty() {
        return Vec::new();
    }
    let med = median(cand.iter().map(|c| c.1).collect());
    cand.into_iter().filter(|c| c.1 > med).map(|c| c.0).collect()
}

#[derive(Clone, Debug)]
pub struct AlignResult {
    pub pose: Pose,
    /// Set when the normal equations were rank deficient; `pose` is the init.
    pub failed: bool,
    /// Robust energy before and after every accepted step, under the scale of
    /// that step.
    pub steps: Vec<(f64, f64)>,
}

struct Level {
    rig: StereoRig,
    points: Vec<Vector3<f64>>,
    template: Vec<f64>,
    jacobians: Vec<Vector6<f64>>,
    weights: Vec<f64>,
    target: GrayImage,
}

impl Level {
    fn build(
        it: &GrayImage,
        it1: &GrayImage,
        disparity: &ScalarMap,
        weights: &ScalarMap,
        rig: &StereoRig,
    ) -> Level {
        let pixels = target_pixels(it, disparity, weights);
        let (gx, gy) = it.gradients();
        let k = &rig.intrinsics;
        let mut lv = Level {
            rig: *rig,
            points: Vec::with_capacity(pixels.len()),
            template: Vec::with_capacity(pixels.len()),
            jacobians: Vec::with_capacity(pixels.len()),
            weights: Vec::with_capacity(pixels.len()),
            target: it1.clone(),
        };
        for (x, y) in pixels {
            let p = rig.backproject(Point2::new(x as f64, y as f64), disparity.get(x, y)).coords;
            let (iz, f) = (1.0 / p.z, k.f);
            let g = Vector2::new(gx.get(x, y), gy.get(x, y));
            // d pi / d X
            let gpx = Vector3::new(g.x * f * iz, g.y * f * iz, -(g.x * f * p.x + g.y * f * p.y) * iz * iz);
            // d X / d twist = [I | -[X]x]
            let rot = p.cross(&gpx);
            lv.jacobians.push(Vector6::new(gpx.x, gpx.y, gpx.z, rot.x, rot.y, rot.z));
            lv.points.push(p);
            lv.template.push(it.get(x, y));
            lv.weights.push(weights.get(x, y));
        }
        lv
    }

    /// `I_{t+1}(w(p; P)) - I_t(p)`; `None` when the warp leaves the image.
    fn residuals(&self, pose: &Pose) -> Vec<Option<f64>> {
        let k = &self.rig.intrinsics;
        self.points
            .iter()
            .zip(&self.template)
            .map(|(x, t)| {
                let c = pose.transform(x);
                if c.z <= 0.0 {
                    return None;
                }
                let q = k.project(&c);
                self.target.sample_checked(q.x, q.y).map(|v| v - t)
            })
            .collect()
    }

    fn energy(&self, res: &[Option<f64>], sigma: f64) -> f64 {
        res.iter()
            .zip(&self.weights)
            .map(|(r, w)| w * r.map_or(tukey_rho(f64::INFINITY, sigma), |r| tukey_rho(r, sigma)))
            .sum()
    }
}

fn pyramid(img: &GrayImage, levels: usize) -> Vec<GrayImage> {
    let mut out = vec![binomial_blur(img)];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let (w, h) = ((prev.width() / 2).max(1), (prev.height() / 2).max(1));
        out.push(resize_scalar(prev, w, h));
    }
    out
}

/// Robust direct alignment of `it` to `it1` starting from `init`.
pub fn irls_align(
    it: &GrayImage,
    it1: &GrayImage,
    disparity: &ScalarMap,
    weights: &ScalarMap,
    rig: &StereoRig,
    init: &Pose,
    params: &VoParams,
) -> AlignResult {
    let src = pyramid(it, params.levels);
    let dst = pyramid(it1, params.levels);
    let mut pose = *init;
    let mut steps = Vec::new();
    for level in (0..params.levels).rev() {
        let (w, h) = src[level].dims();
        let scale = w as f64 / it.width() as f64;
        let lrig = rig.resized(w, h);
        let d = resize_nearest(disparity, w, h).map(|v| v * scale);
        let wt = resize_nearest(weights, w, h);
        let lv = Level::build(&src[level], &dst[level], &d, &wt, &lrig);
        match align_level(&lv, &mut pose, params, &mut steps) {
            Ok(()) => {}
            Err(()) => {
                return AlignResult {
                    pose: *init,
                    failed: true,
                    steps,
                }
            }
        }
    }
    AlignResult {
        pose,
        failed: false,
        steps,
    }
}

fn align_level(lv: &Level, pose: &mut Pose, params: &VoParams, steps: &mut Vec<(f64, f64)>) -> Result<(), ()> {
    if lv.points.len() < 6 {
        return Err(());
    }
    let mut res = lv.residuals(pose);
    for _ in 0..params.max_iterations {
        let valid: Vec<f64> = res
            .iter()
            .zip(&lv.weights)
            .filter_map(|(r, &w)| r.filter(|_| w > 0.0))
            .collect();
        if valid.len() < 6 {
            return Err(());
        }
        let sigma = mad_sigma(&valid);
        let mut hess = Matrix6::zeros();
        let mut grad = Vector6::zeros();
        for ((r, j), w) in res.iter().zip(&lv.jacobians).zip(&lv.weights) {
            if let Some(r) = r {
                let wr = w * tukey_weight(*r, sigma);
                if wr > 0.0 {
                    hess += wr * j * j.transpose();
                    grad += wr * r * j;
                }
            }
        }
        let eig = hess.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo <= 1e-12 * hi {
            return Err(());
        }
        let Some(delta) = hess.cholesky().map(|c| c.solve(&grad)) else {
            return Err(());
        };
        let e0 = lv.energy(&res, sigma);
        let mut step = delta;
        let mut accepted = None;
        for _ in 0..=params.max_halvings {
            let cand = pose.compose(&Pose::exp(&step).inverse());
            let cres = lv.residuals(&cand);
            let e1 = lv.energy(&cres, sigma);
            if e1 <= e0 {
                accepted = Some((cand, cres, e1));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, cres, e1)) = accepted else {
            break;
        };
        *pose = cand.orthonormalized();
        res = cres;
        steps.push((e0, e1));
        if step.norm() < params.min_step {
            break;
        }
    }
    Ok(())
}

/// Where an initial pose came from; also the tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    Identity,
    Previous,
    Feature,
    ForwardTranslation,
}

#[derive(Clone, Debug)]
pub struct PoseHypothesis {
    pub pose: Pose,
    pub provenance: Provenance,
    /// Weighted TNCC residual; filled in by [`select_pose`].
    pub score: f64,
}

impl PoseHypothesis {
    pub fn new(pose: Pose, provenance: Provenance) -> Self {
        Self {
            pose,
            provenance,
            score: f64::INFINITY,
        }
    }
}

/// `sum_p w_p TNCC(p, w(p; P)) / sum_p w_p` over the target pixels.
pub fn tncc_score(
    it: &GrayImage,
    it1: &GrayImage,
    disparity: &ScalarMap,
    weights: &ScalarMap,
    rig: &StereoRig,
    pose: &Pose,
    tau: f64,
) -> f64 {
    let pixels = target_pixels(it, disparity, weights);
    let k = &rig.intrinsics;
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in pixels {
        let w = weights.get(x, y);
        let c = pose.transform(&rig.backproject(Point2::new(x as f64, y as f64), disparity.get(x, y)).coords);
        let cost = if c.z > 0.0 {
            tncc(it, (x, y), it1, k.project(&c), tau)
        } else {
            tau
        };
        num += w * cost;
        den += w;
    }
    if den > 0.0 {
        num / den
    } else {
        tau
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub pose: Pose,
    pub provenance: Provenance,
    pub score: f64,
    /// Every hypothesis failed to align.
    pub failed: bool,
    pub hypotheses: Vec<PoseHypothesis>,
}

/// Refine each hypothesis and keep the one with the lowest TNCC score.
pub fn select_pose(
    hypotheses: &[PoseHypothesis],
    it: &GrayImage,
    it1: &GrayImage,
    disparity: &ScalarMap,
    weights: &ScalarMap,
    rig: &StereoRig,
    params: &VoParams,
) -> Selection {
    assert!(!hypotheses.is_empty(), "at least one pose hypothesis is required");
    let mut order: Vec<usize> = (0..hypotheses.len()).collect();
    order.sort_by_key(|&i| hypotheses[i].provenance);
    let refined: Vec<(PoseHypothesis, bool)> = order
        .par_iter()
        .map(|&i| {
            let h = &hypotheses[i];
            let a = irls_align(it, it1, disparity, weights, rig, &h.pose, params);
            let score = tncc_score(it, it1, disparity, weights, rig, &a.pose, params.tau);
            (
                PoseHypothesis {
                    pose: a.pose,
                    provenance: h.provenance,
                    score,
                },
                a.failed,
            )
        })
        .collect();
    let mut best = 0;
    for (i, (h, _)) in refined.iter().enumerate() {
        if h.score < refined[best].0.score {
            best = i;
        }
    }
    let failed = refined.iter().all(|r| r.1);
    let winner = refined[best].0.clone();
    Selection {
        pose: winner.pose,
        provenance: winner.provenance,
        score: winner.score,
        failed,
        hypotheses: refined.into_iter().map(|r| r.0).collect(),
    }
}

/// `n` forward motions `t = (0, 0, -m)` with `m` geometrically spaced over
/// `[0.1, 4] * 0.05 * median_depth`.
pub fn forward_translation_candidates(n: usize, median_depth: f64) -> Vec<Pose> {
    if n == 0 || !(median_depth > 0.0) {
        return Vec::new();
    }
    let base = 0.05 * median_depth;
    let (lo, hi) = (0.1 * base, 4.0 * base);
    (0..n)
        .map(|i| {
            let m = if n == 1 {
                lo
            } else {
                lo * (hi / lo).powf(i as f64 / (n - 1) as f64)
            };
            Pose::from_translation(Vector3::new(0.0, 0.0, -m))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Feature-based initialization

const CORNER_WINDOW: isize = 2;
const DESC_RADIUS: isize = 5;
const MAX_CORNERS: usize = 400;

/// Shi-Tomasi corners: local maxima (7x7) of the smaller structure-tensor
/// eigenvalue, strongest first.
pub fn detect_corners(img: &GrayImage, max: usize) -> Vec<(usize, usize)> {
    let (w, h) = img.dims();
    let (gx, gy) = img.gradients();
    let border = (DESC_RADIUS + 1) as usize;
    if w <= 2 * border || h <= 2 * border {
        return Vec::new();
    }
    let score = Grid::par_from_fn(w, h, |x, y| {
        if x < border || y < border || x >= w - border || y >= h - border {
            return 0.0;
        }
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for dy in -CORNER_WINDOW..=CORNER_WINDOW {
            for dx in -CORNER_WINDOW..=CORNER_WINDOW {
                let u = gx.get((x as isize + dx) as usize, (y as isize + dy) as usize);
                let v = gy.get((x as isize + dx) as usize, (y as isize + dy) as usize);
                a += u * u;
                b += u * v;
                c += v * v;
            }
        }
        let tr = 0.5 * (a + c);
        tr - (0.25 * (a - c).powi(2) + b * b).sqrt()
    });
    let top = score.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return Vec::new();
    }
    let mut corners = Vec::new();
    for y in border..h - border {
        for x in border..w - border {
            let s = score.get(x, y);
            if s < 0.01 * top {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -3isize..=3 {
                for dx in -3isize..=3 {
                    if (dx, dy) == (0, 0) {
                        continue;
                    }
                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                    if score.contains(qx, qy) {
                        let o = score.get(qx as usize, qy as usize);
                        // Plateau ties go to the first pixel in raster order.
                        if o > s || (o == s && (dy < 0 || (dy == 0 && dx < 0))) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
            }
            if is_max {
                corners.push((s, x, y));
            }
        }
    }
    corners.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    corners.truncate(max);
    corners.into_iter().map(|c| (c.1, c.2)).collect()
}

fn descriptor(img: &GrayImage, (x, y): (usize, usize)) -> Option<Vec<f64>> {
    let mut v = Vec::with_capacity(((2 * DESC_RADIUS + 1) * (2 * DESC_RADIUS + 1)) as usize);
    for dy in -DESC_RADIUS..=DESC_RADIUS {
        for dx in -DESC_RADIUS..=DESC_RADIUS {
            v.push(img.get_clamped(x as isize + dx, y as isize + dy));
        }
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter_mut().for_each(|a| *a -= mean);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    v.iter_mut().for_each(|a| *a /= norm);
    Some(v)
}

/// Sub-pixel position of a match: best NCC within +-2 pixels of `q`, then a
/// parabola through the neighbours along each axis.
pub fn refine_match(a: &GrayImage, p: (usize, usize), b: &GrayImage, q: (usize, usize)) -> Point2<f64> {
    const R: isize = 2;
    let fallback = Point2::new(q.0 as f64, q.1 as f64);
    let Some(da) = descriptor(a, p) else {
        return fallback;
    };
    let n = (2 * R + 3) as usize;
    let mut score = vec![f64::NEG_INFINITY; n * n];
    let at = |dx: isize, dy: isize| ((dy + R + 1) as usize) * n + (dx + R + 1) as usize;
    for dy in -R - 1..=R + 1 {
        for dx in -R - 1..=R + 1 {
            let (x, y) = (q.0 as isize + dx, q.1 as isize + dy);
            if !b.contains(x, y) {
                continue;
            }
            if let Some(db) = descriptor(b, (x as usize, y as usize)) {
                score[at(dx, dy)] = da.iter().zip(&db).map(|(u, v)| u * v).sum();
            }
        }
    }
    let mut best = (0isize, 0isize);
    for dy in -R..=R {
        for dx in -R..=R {
            if score[at(dx, dy)] > score[at(best.0, best.1)] {
                best = (dx, dy);
            }
        }
    }
    let vertex = |l: f64, c: f64, r: f64| {
        let den = l - 2.0 * c + r;
        if l.is_finite() && r.is_finite() && den < 0.0 {
            (0.5 * (l - r) / den).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let (bx, by) = best;
    let c = score[at(bx, by)];
    let ox = vertex(score[at(bx - 1, by)], c, score[at(bx + 1, by)]);
    let oy = vertex(score[at(bx, by - 1)], c, score[at(bx, by + 1)]);
    Point2::new(q.0 as f64 + bx as f64 + ox, q.1 as f64 + by as f64 + oy)
}

/// Mutually best NCC matches between corner sets within `radius` pixels.
pub fn match_corners(
    a: &GrayImage,
    ca: &[(usize, usize)],
    b: &GrayImage,
    cb: &[(usize, usize)],
    radius: f64,
    min_ncc: f64,
) -> Vec<((usize, usize), (usize, usize))> {
    let da: Vec<Option<Vec<f64>>> = ca.iter().map(|&p| descriptor(a, p)).collect();
    let db: Vec<Option<Vec<f64>>> = cb.iter().map(|&p| descriptor(b, p)).collect();
    let score = |i: usize, j: usize| -> f64 {
        let (pa, pb) = (ca[i], cb[j]);
        let dist = ((pa.0 as f64 - pb.0 as f64).powi(2) + (pa.1 as f64 - pb.1 as f64).powi(2)).sqrt();
        match (&da[i], &db[j]) {
            (Some(x), Some(y)) if dist <= radius => x.iter().zip(y).map(|(p, q)| p * q).sum(),
            _ => f64::NEG_INFINITY,
        }
    };
    let best_b: Vec<Option<usize>> = (0..ca.len())
        .into_par_iter()
        .map(|i| argmax((0..cb.len()).map(|j| score(i, j))))
        .collect();
    let best_a: Vec<Option<usize>> = (0..cb.len())
        .into_par_iter()
        .map(|j| argmax((0..ca.len()).map(|i| score(i, j))))
        .collect();
    let mut out = Vec::new();
    for (i, bj) in best_b.iter().enumerate() {
        if let Some(j) = *bj {
            if best_a[j] == Some(i) && score(i, j) >= min_ncc {
                out.push((ca[i], cb[j]));
            }
        }
    }
    out
}

fn argmax(it: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in it.enumerate() {
        if v.is_finite() && best.map_or(true, |b| v > b.1) {
            best = Some((i, v));
        }
    }
    best.map(|b| b.0)
}

/// Real roots of `c[0] + c[1] x + ... + c[n] x^n`.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let mut c = coeffs.to_vec();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-14 * c.iter().map(|v| v.abs()).fold(0.0, f64::max) {
        c.pop();
    }
    let n = c.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let lead = c[n];
    let mut comp = DMatrix::zeros(n, n);
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        comp[(i, n - 1)] = -c[i] / lead;
    }
    let eval = |x: f64| c.iter().rev().fold(0.0, |acc, &a| acc * x + a);
    let deriv = |x: f64| {
        c.iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (i, &a)| acc * x + i as f64 * a)
    };
    let eig: Vec<Complex<f64>> = comp.complex_eigenvalues().iter().cloned().collect();
    eig.into_iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..5 {
                let d = deriv(x);
                if d == 0.0 {
                    break;
                }
                x -= eval(x) / d;
            }
            x
        })
        .collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0))
        .collect()
}

fn poly_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|v| v * s).collect()
}

/// Grunert's three-point absolute pose. `world` are points in the source
/// frame, `bearings` unit rays in the target camera. Returns every pose
/// `P` with `P * world_i` on ray `i`.
pub fn p3p(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let [x1, x2, x3] = world;
    let [r1, r2, r3] = bearings;
    let a2 = (x2 - x3).norm_squared();
    let b2 = (x1 - x3).norm_squared();
    let c2 = (x1 - x2).norm_squared();
    if a2 < 1e-12 || b2 < 1e-12 || c2 < 1e-12 {
        return Vec::new();
    }
    let (ca, cb, cg) = (r2.dot(r3), r1.dot(r3), r1.dot(r2));
    // With s2 = u s1 and s3 = v s1, both constraints are quadratics in u
    // whose coefficients are polynomials in v (ascending powers).
    let q = [1.0, -2.0 * cb, 1.0]; // 1 + v^2 - 2 v cos(beta)
    let a1 = [b2];
    let bb1 = [0.0, -2.0 * b2 * ca];
    let cc1 = poly_sub(&[0.0, 0.0, b2], &poly_scale(&q, a2));
    let a2c = [b2];
    let bb2 = [-2.0 * b2 * cg];
    let cc2 = poly_sub(&[b2], &poly_scale(&q, c2));
    // Resultant in u: (A1 C2 - A2 C1)^2 - (A1 B2 - A2 B1)(B1 C2 - B2 C1).
    let ac = poly_sub(&poly_mul(&a1, &cc2), &poly_mul(&a2c, &cc1));
    let ab = poly_sub(&poly_mul(&a1, &bb2), &poly_mul(&a2c, &bb1));
    let bc = poly_sub(&poly_mul(&bb1, &cc2), &poly_mul(&bb2, &cc1));
    let res = poly_sub(&poly_mul(&ac, &ac), &poly_mul(&ab, &bc));
    let eval = |p: &[f64], x: f64| p.iter().rev().fold(0.0, |acc, &a| acc * x + a);
    let mut out = Vec::new();
    for v in real_roots(&res) {
        if v <= 0.0 {
            continue;
        }
        // A2 * (first) - A1 * (second) is linear in u.
        let lin = eval(&ab, v);
        if lin.abs() < 1e-12 {
            continue;
        }
        let u = -eval(&ac, v) / lin;
        let qv = eval(&q, v);
        if u <= 0.0 || qv <= 0.0 {
            continue;
        }
        let s1 = (b2 / qv).sqrt();
        let cam = [r1 * s1, r2 * (u * s1), r3 * (v * s1)];
        if let Some(p) = kabsch(&[*x1, *x2, *x3], &cam) {
            out.push(p);
        }
    }
    out
}

/// Least-squares rigid transform with `P * src_i ~ dst_i`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Pose> {
    if src.len() < 3 || src.len() != dst.len() {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (d - cd) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    Some(Pose::new(r, cd - r * cs))
}

/// A 3D point of frame `t` observed at a pixel of frame `t+1`.
#[derive(Clone, Copy, Debug)]
pub struct Correspondence {
    pub point: Vector3<f64>,
    pub observed: Point2<f64>,
}

fn reprojection_error(c: &Correspondence, pose: &Pose, rig: &StereoRig) -> f64 {
    let x = pose.transform(&c.point);
    if x.z <= 0.0 {
        return f64::INFINITY;
    }
    let q = rig.intrinsics.project(&x);
    (q - c.observed).norm()
}

/// Gauss-Newton on the reprojection error of `inliers`.
fn polish(corr: &[Correspondence], pose: &Pose, rig: &StereoRig) -> Pose {
    let f = rig.intrinsics.f;
    let mut pose = *pose;
    for _ in 0..10 {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for c in corr {
            let x = pose.transform(&c.point);
            if x.z <= 0.0 {
                continue;
            }
            let q = rig.intrinsics.project(&x);
            let r = q - c.observed;
            let iz = 1.0 / x.z;
            let jp = nalgebra::Matrix2x3::new(f * iz, 0.0, -f * x.x * iz * iz, 0.0, f * iz, -f * x.y * iz * iz);
            // Left perturbation exp(d) * P: dX = [I | -[X]x].
            let mut jx = nalgebra::Matrix3x6::zeros();
            jx.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            jx.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-crate::geometry::skew(&x)));
            let j = jp * jx;
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(chol) = h.cholesky() else { break };
        let d = -chol.solve(&g);
        pose = Pose::exp(&d).compose(&pose).orthonormalized();
        if d.norm() < 1e-10 {
            break;
        }
    }
    pose
}

#[derive(Clone, Debug)]
pub struct RansacResult {
    pub pose: Pose,
    pub inliers: Vec<bool>,
}

/// 3D-2D RANSAC with P3P samples, then a least-squares polish on the inliers.
pub fn ransac_pose(corr: &[Correspondence], rig: &StereoRig, params: &VoParams) -> Option<RansacResult> {
    if corr.len() < 4 {
        return None;
    }
    let k = &rig.intrinsics;
    let bearing = |q: &Point2<f64>| k.unproject(*q).normalize();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Pose)> = None;
    for _ in 0..params.ransac_iterations {
        let idx = rand::seq::index::sample(&mut rng, corr.len(), 3);
        let pick = [idx.index(0), idx.index(1), idx.index(2)];
        let world = pick.map(|i| corr[i].point);
        let rays = pick.map(|i| bearing(&corr[i].observed));
        for pose in p3p(&world, &rays) {
            let n = corr
                .iter()
                .filter(|c| reprojection_error(c, &pose, rig) < params.ransac_threshold)
                .count();
            if best.as_ref().map_or(true, |b| n > b.0) {
                best = Some((n, pose));
            }
        }
    }
    let (_, pose) = best?;
    let inl: Vec<Correspondence> = corr
        .iter()
        .filter(|c| reprojection_error(c, &pose, rig) < params.ransac_threshold)
        .cloned()
        .collect();
    let pose = polish(&inl, &pose, rig);
    let inliers: Vec<bool> = corr
        .iter()
        .map(|c| reprojection_error(c, &pose, rig) < params.ransac_threshold)
        .collect();
    Some(RansacResult { pose, inliers })
}

/// Pose from tracked corners; `None` when fewer than 6 corners are usable or
/// RANSAC keeps fewer than `min_inliers`.
pub fn feature_init(
    it: &GrayImage,
    it1: &GrayImage,
    disparity: &ScalarMap,
    occlusion: Option<&MaskMap>,
    rig: &StereoRig,
    params: &VoParams,
) -> Option<Pose> {
    let usable = |(x, y): (usize, usize)| {
        let d = disparity.get(x, y);
        d.is_finite() && d > MIN_DISPARITY && !occlusion.is_some_and(|o| o.get(x, y))
    };
    let ca: Vec<(usize, usize)> = detect_corners(it, MAX_CORNERS).into_iter().filter(|&p| usable(p)).collect();
    if ca.len() < 6 {
        return None;
    }
    let cb = detect_corners(it1, MAX_CORNERS);
    let radius = 0.15 * it.width().max(it.height()) as f64;
    let matches = match_corners(it, &ca, it1, &cb, radius.max(16.0), 0.8);
    let corr: Vec<Correspondence> = matches
        .iter()
        .map(|&((x, y), q)| Correspondence {
            point: rig.backproject(Point2::new(x as f64, y as f64), disparity.get(x, y)).coords,
            observed: refine_match(it, (x, y), it1, q),
        })
        .collect();
    let r = ransac_pose(&corr, rig, params)?;
    let n = r.inliers.iter().filter(|&&b| b).count();
    (n >= params.min_inliers).then_some(r.pose)
}

/// Median depth over valid disparities.
pub fn median_depth(disparity: &ScalarMap, rig: &StereoRig) -> Option<f64> {
    let v: Vec<f64> = disparity
        .iter()
        .filter(|d| d.is_finite() && **d > MIN_DISPARITY)
        .map(|&d| rig.depth(d))
        .collect();
    (!v.is_empty()).then(|| median(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{texel_for, MotionSpec, PlaneSpec, SceneSpec};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn tukey_values() {
        assert_eq!(tukey_rho(0.0, 1.0), 0.0);
        let k = TUKEY_C * 0.3;
        assert_relative_eq!(tukey_rho(k, 0.3), k * k / 6.0);
        assert_relative_eq!(tukey_rho(-5.0 * k, 0.3), k * k / 6.0);
        assert_relative_eq!(tukey_rho(k / 2.0, 0.3), k * k / 6.0 * (1.0 - 0.75f64.powi(3)), epsilon = 1e-12);
        assert_eq!(tukey_weight(2.0 * k, 0.3), 0.0);
    }

    #[test]
    fn forward_candidates() {
        let c = forward_translation_candidates(16, 20.0);
        assert_eq!(c.len(), 16);
        let m: Vec<f64> = c.iter().map(|p| -p.t.z).collect();
        assert!(m.windows(2).all(|w| w[1] > w[0]));
        let ratio = m[1] / m[0];
        assert!(m.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
        assert_relative_eq!(m[0], 0.1, epsilon = 1e-12);
        assert_relative_eq!(m[15], 4.0, epsilon = 1e-12);
        assert!(forward_translation_candidates(0, 20.0).is_empty());
    }

    fn scene(motion: MotionSpec) -> crate::synthetic::Sequence {
        let mut s = SceneSpec::planes_demo(160, 96);
        s.motion = motion;
        s.render().unwrap()
    }

    fn gray_pair(seq: &crate::synthetic::Sequence) -> (GrayImage, GrayImage, ScalarMap) {
        (
            seq.frames[0].left.to_gray(),
            seq.frames[1].left.to_gray(),
            seq.truth[0].disparity.clone(),
        )
    }

    #[test]
    fn identical_frames_give_identity() {
        let seq = scene(MotionSpec::default());
        let (a, _, d) = gray_pair(&seq);
        let w = Grid::new(160, 96, 1.0);
        let r = irls_align(&a, &a, &d, &w, &seq.rig, &Pose::identity(), &VoParams::default());
        assert!(!r.failed);
        assert!(r.pose.t.norm() < 1e-9 && r.pose.rotation_angle() < 1e-9);
    }

    #[test]
    fn recovers_forward_translation() {
        let mut s = SceneSpec::planes_demo(320, 192);
        s.planes = vec![PlaneSpec {
            center: [0.0, 0.0, 4.0],
            axis_u: [1.0, 0.0, 0.0],
            axis_v: [0.0, 0.8, 0.6],
            unbounded: true,
            texel: texel_for(s.camera.f, 4.0),
            seed: 5,
            tint: [1.0; 3],
        }];
        s.motion = MotionSpec {
            translation: [0.0, 0.0, -0.1],
            rotation: [0.0; 3],
        };
        let seq = s.render().unwrap();
        let (a, b, d) = gray_pair(&seq);
        let w = Grid::new(320, 192, 1.0);
        let r = irls_align(&a, &b, &d, &w, &seq.rig, &Pose::identity(), &VoParams::default());
        let truth = seq.truth[0].motion.as_ref().unwrap().pose;
        assert!((r.pose.t - truth.t).norm() < 1e-3, "{:?}", r.pose.t);
        assert!(r.steps.iter().all(|(e0, e1)| e1 <= e0));
    }

    #[test]
    fn recovers_yaw() {
        let motion = MotionSpec {
            translation: [0.0; 3],
            rotation: [0.0, 2f64.to_radians(), 0.0],
        };
        let seq = scene(motion);
        let (a, b, d) = gray_pair(&seq);
        let w = Grid::new(160, 96, 1.0);
        let r = irls_align(&a, &b, &d, &w, &seq.rig, &Pose::identity(), &VoParams::default());
        let truth = seq.truth[0].motion.as_ref().unwrap().pose;
        let err = r.pose.compose(&truth.inverse()).rotation_angle().to_degrees();
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn textureless_input_fails() {
        let img = Grid::new(64, 48, 0.5);
        let d = Grid::new(64, 48, 5.0);
        let w = Grid::new(64, 48, 1.0);
        let rig = SceneSpec::planes_demo(64, 48).rig();
        let init = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let r = irls_align(&img, &img, &d, &w, &rig, &init, &VoParams::default());
        assert!(r.failed);
        assert_eq!(r.pose, init);
    }

    #[test]
    fn occluded_pixels_have_no_influence() {
        let motion = MotionSpec {
            translation: [0.02, 0.0, -0.05],
            rotation: [0.0, 0.003, 0.0],
        };
        let seq = scene(motion);
        let (a, b, d) = gray_pair(&seq);
        let occ = Grid::from_fn(160, 96, |x, y| (40..120).contains(&x) && (20..76).contains(&y));
        let w = base_weights(&occ, None);
        let mut b2 = b.clone();
        for y in 44..52 {
            for x in 76..84 {
                b2.set(x, y, 1.0 - b2.get(x, y));
            }
        }
        let p = VoParams::default();
        let r1 = irls_align(&a, &b, &d, &w, &seq.rig, &Pose::identity(), &p);
        let r2 = irls_align(&a, &b2, &d, &w, &seq.rig, &Pose::identity(), &p);
        assert_eq!(r1.pose, r2.pose);
    }

    #[test]
    fn selection_prefers_true_motion_and_breaks_ties_by_provenance() {
        let motion = MotionSpec {
            translation: [0.0, 0.0, -0.3],
            rotation: [0.0, 0.01, 0.0],
        };
        let seq = scene(motion);
        let (a, b, d) = gray_pair(&seq);
        let w = Grid::new(160, 96, 1.0);
        let truth = seq.truth[0].motion.as_ref().unwrap().pose;
        let p = VoParams {
            max_iterations: 0,
            ..Default::default()
        };
        let hyps = [
            PoseHypothesis::new(truth, Provenance::Feature),
            PoseHypothesis::new(Pose::identity(), Provenance::Identity),
        ];
        let s = select_pose(&hyps, &a, &b, &d, &w, &seq.rig, &p);
        assert_eq!(s.provenance, Provenance::Feature);
        let same = [
            PoseHypothesis::new(truth, Provenance::ForwardTranslation),
            PoseHypothesis::new(truth, Provenance::Previous),
        ];
        let s = select_pose(&same, &a, &b, &d, &w, &seq.rig, &p);
        assert_eq!(s.provenance, Provenance::Previous);
        let one = [PoseHypothesis::new(truth, Provenance::Identity)];
        assert_eq!(select_pose(&one, &a, &b, &d, &w, &seq.rig, &p).pose, truth);
    }

    #[test]
    fn p3p_recovers_pose() {
        let truth = Pose::from_axis_angle(Vector3::new(0.2, 1.0, -0.3), 0.3).compose(&Pose::from_translation(Vector3::new(
            0.3, -0.2, 0.5,
        )));
        let world = [
            Vector3::new(0.5, 0.2, 4.0),
            Vector3::new(-1.0, 0.7, 6.0),
            Vector3::new(0.3, -0.9, 5.0),
        ];
        let rays = world.map(|x| truth.transform(&x).normalize());
        let sols = p3p(&world, &rays);
        assert!(!sols.is_empty());
        let best = sols
            .iter()
            .map(|p| (p.t - truth.t).norm() + (p.r - truth.r).abs().max())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-6, "{best}");
    }

    #[test]
    fn quartic_roots() {
        // (x - 1)(x + 2)(x - 3)(x^2 + 1) has real roots 1, -2, 3.
        let p = poly_mul(&poly_mul(&poly_mul(&[-1.0, 1.0], &[2.0, 1.0]), &[-3.0, 1.0]), &[1.0, 0.0, 1.0]);
        let mut r = real_roots(&p);
        r.sort_by(f64::total_cmp);
        assert_eq!(r.len(), 3);
        for (a, b) in r.iter().zip([-2.0, 1.0, 3.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_init_static_and_blank() {
        let seq = scene(MotionSpec::default());
        let (a, b, d) = gray_pair(&seq);
        let pose = feature_init(&a, &b, &d, None, &seq.rig, &VoParams::default()).expect("enough corners");
        assert!(pose.rotation_angle().to_degrees() < 0.1);
        assert!(pose.t.norm() < 5e-3, "{}", pose.t.norm());
        let blank = Grid::new(160, 96, 0.5);
        assert!(feature_init(&blank, &blank, &d, None, &seq.rig, &VoParams::default()).is_none());
    }

    #[test]
    fn ransac_tolerates_moving_outliers() {
        let rig = SceneSpec::planes_demo(320, 200).rig();
        let truth = Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.02)
            .compose(&Pose::from_translation(Vector3::new(0.05, 0.0, -0.4)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corr: Vec<Correspondence> = (0..100)
            .map(|i| {
                let x = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-2.0..2.0), rng.random_range(6.0..30.0));
                let moved = if i % 10 < 3 {
                    Pose::from_translation(Vector3::new(0.6, 0.1, 0.0)).transform(&x)
                } else {
                    x
                };
                let q = rig.intrinsics.project(&truth.transform(&moved));
                Correspondence {
                    point: x,
                    observed: Point2::new(q.x.round(), q.y.round()),
                }
            })
            .collect();
        let r = ransac_pose(&corr, &rig, &VoParams::default()).unwrap();
        let rot = r.pose.compose(&truth.inverse()).rotation_angle().to_degrees();
        assert!(rot < 0.1, "{rot}");
        assert!((r.pose.t - truth.t).norm() < 0.02 * 15.0, "{:?}", r.pose.t);
        assert!(r.inliers.iter().filter(|&&b| b).count() >= 60);
    }
}
