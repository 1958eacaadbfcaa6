//! Frame-sequential orchestration of all stages.
//!
//! Frame `t` reads the stereo pairs `t-1` (when present), `t` and `t+1` and
//! emits disparity, flow, camera motion and moving-object mask at input
//! resolution. A sequence of `N + 1` pairs yields `N` frames.

pub mod config;
pub mod io;
pub mod metrics;
pub mod viz;

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{Point2, Vector2};

use crate::edges::color_edge_weights;
use crate::error::{Error, Result};
use crate::flow::{feature_matches, nonrigid_flow, FlowInputs};
use crate::fusion::{fuse, fusion_unaries, FusionProblem};
use crate::geometry::{rigid_flow, warp, Pose, StereoRig};
use crate::grid::{resize_color, resize_nearest, resize_scalar, scaled_dims, ColorImage, Grid, MaskMap, ScalarMap, VectorMap};
use crate::odometry::{base_weights, feature_init, forward_translation_candidates, median_depth, select_pose, PoseHypothesis, Provenance};
use crate::segmentation::{
    appearance_term, color_term, flow_term, ground_prior, initial_seed, potts_weights, prior_flow, prior_term, segment,
    smooth_costs, soft_mask, superpixels, variance_weight, ColorModel, ColorModelAverage, EdgeDetector, PriorFlow,
    SegPriors, SobelEdges,
};
use crate::stereo::{binocular, epipolar_refine, reduce_range, EpipolarViews, StereoOutput, StereoParams, ViewEdges};

pub use config::{Config, Profile};
pub use metrics::{evaluate, evaluate_dirs, Estimate, GroundTruth, SceneFlowMetrics};

/// Images of one frame step.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub left: &'a ColorImage,
    pub right: &'a ColorImage,
    pub next_left: &'a ColorImage,
    pub next_right: &'a ColorImage,
    pub prev: Option<(&'a ColorImage, &'a ColorImage)>,
    /// Optional external flow `t -> t+1` at input resolution; `NaN` = invalid.
    pub prior_flow: Option<&'a VectorMap>,
}

/// What one frame hands to the next. Maps are at the stereo working scale.
#[derive(Clone, Debug, Default)]
pub struct FrameState {
    pub index: usize,
    pub prev_mask: Option<MaskMap>,
    pub prev_flow: Option<VectorMap>,
    pub prev_pose: Option<Pose>,
    pub colors: ColorModelAverage,
    /// Binocular result of frame `index`, computed as the look-ahead of the
    /// previous frame.
    lookahead: Option<(usize, StereoOutput)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionEnergies {
    pub fused: f64,
    pub rigid: f64,
    pub nonrigid: f64,
}

#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub index: usize,
    pub disparity: ScalarMap,
    /// Estimated disparity of every reference pixel in the next frame.
    pub disparity_next: ScalarMap,
    pub flow: VectorMap,
    /// Camera motion `t -> t+1`.
    pub pose: Pose,
    pub mask: MaskMap,
    /// Segmentation mask before fusion, at input resolution.
    pub initial_mask: MaskMap,
    pub fusion: Option<FusionEnergies>,
    /// Set when a stage failed and the frame fell back to rigid-only output.
    pub fallback: Option<String>,
    /// Wall-clock seconds per stage; not part of the deterministic output.
    pub timings: Vec<(&'static str, f64)>,
}

impl FrameOutput {
    pub fn maps(&self) -> io::FrameMaps {
        io::FrameMaps {
            disparity: self.disparity.clone(),
            disparity_next: self.disparity_next.clone(),
            flow: self.flow.clone(),
            mask: Some(self.mask.clone()),
        }
    }
}

/// Write frame outputs and their poses in the result layout.
pub fn write_outputs(dir: &std::path::Path, frames: &[FrameOutput]) -> Result<()> {
    for f in frames {
        io::write_frame_maps(dir, f.index, &f.maps())?;
    }
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();
    io::write_poses(&dir.join(io::POSES_FILE), &poses)
}

struct Timer {
    start: Instant,
    laps: Vec<(&'static str, f64)>,
}

impl Timer {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            laps: Vec::new(),
        }
    }

    fn lap(&mut self, name: &'static str) {
        let now = Instant::now();
        self.laps.push((name, (now - self.start).as_secs_f64()));
        self.start = now;
    }
}

/// Bilinear resampling of a vector field over its finite samples, with the
/// vectors rescaled to the new pixel grid. `NaN` where no finite neighbor
/// contributes.
pub fn resample_flow(flow: &VectorMap, width: usize, height: usize) -> VectorMap {
    let (sw, sh) = flow.dims();
    let (rx, ry) = (sw as f64 / width as f64, sh as f64 / height as f64);
    let nan = Vector2::new(f64::NAN, f64::NAN);
    Grid::par_from_fn(width, height, |x, y| {
        let u = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f64);
        let v = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let mut acc = Vector2::zeros();
        let mut wsum = 0.0;
        for (xx, yy, w) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            let f = flow.get(xx, yy);
            if w > 0.0 && f.x.is_finite() && f.y.is_finite() {
                acc += w * f;
                wsum += w;
            }
        }
        if wsum > 0.0 {
            let m = acc / wsum;
            Vector2::new(m.x / rx, m.y / ry)
        } else {
            // Exactly on a non-finite sample, or every contributing sample
            // is missing.
            let f = flow.get(u.round() as usize, v.round() as usize);
            if f.x.is_finite() && f.y.is_finite() {
                Vector2::new(f.x / rx, f.y / ry)
            } else {
                nan
            }
        }
    })
}

/// Disparity map resampled to a new width, values rescaled with it.
pub fn resample_disparity(d: &ScalarMap, width: usize, height: usize) -> ScalarMap {
    let r = width as f64 / d.width() as f64;
    resize_scalar(d, width, height).map(|v| v * r)
}

fn check_dims(what: &str, img: &ColorImage, dims: (usize, usize)) -> Result<()> {
    if img.dims() == dims {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} is {}x{}, expected {}x{}",
            img.width(),
            img.height(),
            dims.0,
            dims.1
        )))
    }
}

/// Everything computed at the stereo working scale.
struct Working {
    left: ColorImage,
    gray: crate::grid::GrayImage,
    next_gray: crate::grid::GrayImage,
    rig: StereoRig,
}

/// Run one frame and advance `state`.
pub fn process_frame(input: &FrameInput, state: &mut FrameState, rig: &StereoRig, config: &Config) -> Result<FrameOutput> {
    config.validate()?;
    let dims = (rig.width, rig.height);
    check_dims("left image", input.left, dims)?;
    check_dims("right image", input.right, dims)?;
    check_dims("next left image", input.next_left, dims)?;
    check_dims("next right image", input.next_right, dims)?;
    if let Some((l, r)) = input.prev {
        check_dims("previous left image", l, dims)?;
        check_dims("previous right image", r, dims)?;
    }
    if let Some(f) = input.prior_flow {
        if f.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: f.dims(),
            });
        }
    }

    let mut timer = Timer::new();
    let (w, h) = scaled_dims(dims.0, dims.1, config.stereo_scale);
    let wrig = rig.resized(w, h);
    let sx = w as f64 / dims.0 as f64;
    let down = |img: &ColorImage| resize_color(img, w, h);
    let (cl, cr, cnl, cnr) = (down(input.left), down(input.right), down(input.next_left), down(input.next_right));
    let (gl, gr, gnl, gnr) = (cl.to_gray(), cr.to_gray(), cnl.to_gray(), cnr.to_gray());
    let prev = input.prev.map(|(l, r)| (down(l).to_gray(), down(r).to_gray()));
    let stereo_params = StereoParams {
        max_disparity: ((config.max_disparity as f64 * sx).round() as usize).max(1),
        ..config.stereo.clone()
    };
    let edges_l = color_edge_weights(&cl);
    timer.lap("resample");

    let bino = match state.lookahead.take() {
        Some((i, s)) if i == state.index && s.disparity.dims() == (w, h) => s,
        _ => {
            let er = color_edge_weights(&cr);
            binocular(&gl, &gr, &stereo_params, ViewEdges { left: Some(&edges_l), right: Some(&er) })
        }
    };
    let bino_next = {
        let (el, er) = (color_edge_weights(&cnl), color_edge_weights(&cnr));
        binocular(&gnl, &gnr, &stereo_params, ViewEdges { left: Some(&el), right: Some(&er) })
    };
    timer.lap("binocular");

    // Pixels the previous mask predicts as moving.
    let soft = match (&state.prev_mask, &state.prev_flow) {
        (Some(m), Some(f)) if m.dims() == (w, h) && f.dims() == (w, h) => Some(soft_mask(m, f, config.mask_dilation)),
        _ => None,
    };
    let moving = soft.as_ref().map(|s| s.map(|&v| v > 0.0));
    let vo_weights = base_weights(&bino.occlusion, moving.as_ref());
    let mut hyps = vec![PoseHypothesis::new(Pose::identity(), Provenance::Identity)];
    if let Some(p) = state.prev_pose {
        hyps.push(PoseHypothesis::new(p, Provenance::Previous));
    }
    if let Some(p) = feature_init(&gl, &gnl, &bino.disparity, Some(&bino.occlusion), &wrig, &config.vo) {
        hyps.push(PoseHypothesis::new(p, Provenance::Feature));
    }
    if config.vo.forward_candidates > 0 {
        if let Some(z) = median_depth(&bino.disparity, &wrig) {
            for p in forward_translation_candidates(config.vo.forward_candidates, z) {
                hyps.push(PoseHypothesis::new(p, Provenance::ForwardTranslation));
            }
        }
    }
    let selection = select_pose(&hyps, &gl, &gnl, &bino.disparity, &vo_weights, &wrig, &config.vo);
    let pose = selection.pose;
    timer.lap("odometry");

    let views = EpipolarViews {
        left: &gl,
        prev: prev.as_ref().map(|(l, r)| (l, r)),
        next: (&gnl, &gnr),
        prev_pose: state.prev_pose.as_ref(),
        pose: &pose,
    };
    let reduced = bino.with_range(reduce_range(&bino.disparity, &bino.occlusion, stereo_params.max_disparity));
    let refined = epipolar_refine(&views, &wrig, &reduced, &stereo_params, &config.epipolar, Some(&edges_l));
    let disparity = refined.disparity.clone();
    let rigid = rigid_flow(&disparity, &wrig, &pose);
    timer.lap("epipolar");

    let work = Working {
        left: cl,
        gray: gl.clone(),
        next_gray: gnl.clone(),
        rig: wrig,
    };
    let motion = if selection.failed {
        Err("visual odometry failed on every hypothesis".to_string())
    } else {
        motion_stages(input, state, config, &work, &views, &disparity, refined.max_disparity, &rigid, soft, &mut timer)
            .map_err(|e| e.to_string())
    };

    let (flow, mask, initial_mask, fusion, model, fallback) = match motion {
        Ok(m) => (m.flow, m.mask, m.initial, Some(m.energies), Some(m.model), None),
        Err(reason) => {
            log::warn!("frame {}: {reason}; emitting rigid-only output", state.index);
            let empty = Grid::new(w, h, false);
            (rigid.clone(), empty.clone(), empty, None, None, Some(reason))
        }
    };

    // Next-frame disparity: the pose-transformed depth on the background,
    // the next binocular map at the flow target on movers.
    let disparity_next = Grid::from_fn(w, h, |x, y| {
        let p = Point2::new(x as f64, y as f64);
        if mask.get(x, y) {
            let f = flow.get(x, y);
            bino_next.disparity.sample_checked(p.x + f.x, p.y + f.y).unwrap_or(f64::NAN)
        } else {
            let wp = warp(p, disparity.get(x, y), &work.rig, &pose);
            if wp.in_front {
                wp.disparity
            } else {
                f64::NAN
            }
        }
    });

    let (iw, ih) = dims;
    let out = FrameOutput {
        index: state.index,
        disparity: resample_disparity(&disparity, iw, ih),
        disparity_next: resample_disparity(&disparity_next, iw, ih),
        flow: resample_flow(&flow, iw, ih),
        pose,
        mask: resize_nearest(&mask, iw, ih),
        initial_mask: resize_nearest(&initial_mask, iw, ih),
        fusion,
        fallback,
        timings: Vec::new(),
    };

    if let Some(model) = model.filter(|_| mask.any()) {
        state.colors.push(&model);
    }
    state.prev_mask = Some(mask);
    state.prev_flow = Some(flow);
    state.prev_pose = Some(pose);
    state.index += 1;
    state.lookahead = Some((state.index, bino_next));
    timer.lap("output");
    Ok(FrameOutput {
        timings: timer.laps,
        ..out
    })
}

struct Motion {
    flow: VectorMap,
    mask: MaskMap,
    initial: MaskMap,
    energies: FusionEnergies,
    model: ColorModel,
}

fn add3(a: &ScalarMap, b: &ScalarMap, c: &ScalarMap) -> ScalarMap {
    Grid::from_fn(a.width(), a.height(), |x, y| a.get(x, y) + b.get(x, y) + c.get(x, y))
}

#[allow(clippy::too_many_arguments)]
fn motion_stages(
    input: &FrameInput,
    state: &FrameState,
    config: &Config,
    work: &Working,
    views: &EpipolarViews,
    disparity: &ScalarMap,
    max_disparity: usize,
    rigid: &VectorMap,
    soft: Option<ScalarMap>,
    timer: &mut Timer,
) -> Result<Motion> {
    let seg = &config.seg;
    let (w, h) = work.gray.dims();
    let w_var = variance_weight(&work.gray, seg.tau_w);
    let targets = crate::stereo::temporal_targets(views, &work.rig);
    let ncc = appearance_term(&work.gray, &targets, disparity, &work.rig, &w_var, seg);
    let prior = match input.prior_flow {
        Some(f) => {
            let flow = resample_flow(f, w, h);
            let valid = flow.map(|v| v.x.is_finite() && v.y.is_finite());
            PriorFlow { flow, valid }
        }
        None => prior_flow(&work.gray, &work.next_gray),
    };
    let flo = flow_term(rigid, &prior.flow, &prior.valid, &w_var, seg);
    let sp = superpixels(&work.left, seg.superpixels);
    let (ncc_s, flo_s) = (smooth_costs(&ncc, &sp), smooth_costs(&flo, &sp));
    let ground = config
        .ground_prior
        .then(|| ground_prior(disparity, max_disparity as f64, seg, config.vo.seed));
    let priors = SegPriors {
        mask: soft,
        color: state.colors.mean().cloned(),
        ground,
    };
    let pri = prior_term(&work.left, &priors, seg);
    let data = add3(&ncc_s, &flo_s, &pri);
    let edges = SobelEdges.detect(&work.left);
    let potts = potts_weights(&work.left, disparity, &edges, seg.kappa3).total(seg.lambda_potts);
    let seed = initial_seed(&ncc_s, &flo_s);
    let segmentation = segment(&work.left, &data, &potts, &seed, seg)?;
    let initial = segmentation.mask.clone();
    timer.lap("segmentation");

    // Non-rigid flow at its own scale.
    let (iw, ih) = (input.left.width(), input.left.height());
    let (fw, fh) = scaled_dims(iw, ih, config.flow_scale);
    let frig = work.rig.resized(fw, fh);
    let (fa, fb) = (resize_color(input.left, fw, fh), resize_color(input.next_left, fw, fh));
    let (ga, gb) = (fa.to_gray(), fb.to_gray());
    let fmask = resize_nearest(&initial, fw, fh);
    let fdisp = resample_disparity(disparity, fw, fh);
    let frigid = rigid_flow(&fdisp, &frig, views.pose);
    let features = feature_matches(&ga, &gb);
    let fprior_flow = resample_flow(&prior.flow, fw, fh);
    let fprior_valid = resize_nearest(&prior.valid, fw, fh);
    let (ea, eb) = (color_edge_weights(&fa), color_edge_weights(&fb));
    let nonrigid = nonrigid_flow(
        &ga,
        &gb,
        &FlowInputs {
            mask: &fmask,
            rigid: &frigid,
            disparity: &fdisp,
            features: &features,
            prior: Some((&fprior_flow, &fprior_valid)),
            edges: (Some(&ea), Some(&eb)),
        },
        &config.flow,
    );
    let nonrigid_w = resample_flow(&nonrigid.flow, w, h);
    let consistent_w = resize_nearest(&nonrigid.consistent, w, h);
    timer.lap("flow");

    // Pixels without a non-rigid vector cannot take that proposal.
    let free = Grid::from_fn(w, h, |x, y| {
        let f = nonrigid_w.get(x, y);
        initial.get(x, y) && f.x.is_finite() && f.y.is_finite()
    });
    let terms = fusion_unaries(&work.gray, &work.next_gray, rigid, &nonrigid_w, &consistent_w, &free, &w_var, seg);
    let col = color_term(&work.left, &segmentation.model, seg.lambda_col);
    let (tn, tf) = (smooth_costs(&terms.ncc, &sp), smooth_costs(&terms.flo, &sp));
    let unary = Grid::from_fn(w, h, |x, y| tn.get(x, y) + tf.get(x, y) + col.get(x, y) + pri.get(x, y));
    let problem = FusionProblem {
        unary,
        pairwise: potts,
        initial: free,
        rigid: rigid.clone(),
        nonrigid: nonrigid_w,
    };
    let fused = fuse(&problem)?;
    timer.lap("fusion");
    Ok(Motion {
        flow: fused.flow,
        mask: fused.mask,
        initial,
        energies: FusionEnergies {
            fused: fused.energy,
            rigid: fused.energy_rigid,
            nonrigid: fused.energy_nonrigid,
        },
        model: segmentation.model,
    })
}

/// One stereo pair of a sequence, with an optional external prior flow
/// towards the next pair.
#[derive(Clone, Debug)]
pub struct PairInput {
    pub left: ColorImage,
    pub right: ColorImage,
    pub prior_flow: Option<VectorMap>,
}

/// Streaming runner: feed pairs in order, get frame `t` once pair `t+1` is in.
#[derive(Debug)]
pub struct Pipeline {
    rig: StereoRig,
    config: Config,
    state: FrameState,
    window: VecDeque<PairInput>,
}

impl Pipeline {
    pub fn new(rig: StereoRig, config: Config) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            rig,
            config,
            state: FrameState::default(),
            window: VecDeque::with_capacity(3),
        })
    }

    pub fn state(&self) -> &FrameState {
        &self.state
    }

    pub fn push(&mut self, pair: PairInput) -> Result<Option<FrameOutput>> {
        self.window.push_back(pair);
        if self.window.len() > 3 {
            self.window.pop_front();
        }
        let n = self.window.len();
        if n < 2 {
            return Ok(None);
        }
        let (cur, next) = (&self.window[n - 2], &self.window[n - 1]);
        let prev = (n == 3).then(|| (&self.window[0].left, &self.window[0].right));
        let input = FrameInput {
            left: &cur.left,
            right: &cur.right,
            next_left: &next.left,
            next_right: &next.right,
            prev,
            prior_flow: cur.prior_flow.as_ref(),
        };
        process_frame(&input, &mut self.state, &self.rig, &self.config).map(Some)
    }
}

/// All frames of a sequence of stereo pairs.
pub fn run_sequence(pairs: Vec<PairInput>, rig: &StereoRig, config: &Config) -> Result<Vec<FrameOutput>> {
    let mut p = Pipeline::new(*rig, config.clone())?;
    let mut out = Vec::new();
    for pair in pairs {
        if let Some(f) = p.push(pair)? {
            out.push(f);
        }
    }
    Ok(out)
}
