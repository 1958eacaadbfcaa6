//! Binary fusion of the rigid and non-rigid flow proposals. The labeling
//! doubles as the final motion segmentation.

use nalgebra::Point2;

use crate::edges::EdgeWeightMap;
use crate::error::Result;
use crate::grid::{GrayImage, Grid, MaskMap, ScalarMap, VectorMap};
use crate::matching::tncc;
use crate::maxflow::{min_cut, BinaryMrf};
use crate::segmentation::{flow_residual_cost, SegParams};

/// Data terms of the fusion energy before smoothing.
#[derive(Clone, Debug)]
pub struct FusionTerms {
    pub ncc: ScalarMap,
    pub flo: ScalarMap,
}

/// `C_ncc = lambda_ncc w (TNCC(p, p + F_rig) - TNCC(p, p + F_non))` and the
/// flow term with `F_non` as the prior. Both are 0 off the initial mask,
/// where `p + F_rig` leaves the image, or where `F_non` is inconsistent.
pub fn fusion_unaries(
    it: &GrayImage,
    it1: &GrayImage,
    rigid: &VectorMap,
    nonrigid: &VectorMap,
    consistent: &MaskMap,
    initial: &MaskMap,
    w_var: &ScalarMap,
    params: &SegParams,
) -> FusionTerms {
    let (w, h) = it.dims();
    let usable = |x: usize, y: usize| {
        let (fr, fn_) = (rigid.get(x, y), nonrigid.get(x, y));
        initial.get(x, y)
            && consistent.get(x, y)
            && fr.x.is_finite()
            && fn_.x.is_finite()
            && it1.contains_point(x as f64 + fr.x, y as f64 + fr.y)
    };
    let ncc = Grid::par_from_fn(w, h, |x, y| {
        if !usable(x, y) {
            return 0.0;
        }
        let (fr, fn_) = (rigid.get(x, y), nonrigid.get(x, y));
        let at = |f: nalgebra::Vector2<f64>| Point2::new(x as f64 + f.x, y as f64 + f.y);
        let tr = tncc(it, (x, y), it1, at(fr), params.tau);
        let tn = tncc(it, (x, y), it1, at(fn_), params.tau);
        params.lambda_ncc * w_var.get(x, y) * (tr - tn)
    });
    let flo = Grid::from_fn(w, h, |x, y| {
        if !usable(x, y) {
            return 0.0;
        }
        let (fr, fn_) = (rigid.get(x, y), nonrigid.get(x, y));
        flow_residual_cost((fr - fn_).norm(), fr.norm(), w_var.get(x, y), params)
    });
    FusionTerms { ncc, flo }
}

/// A fusion move restricted to the initial mask.
#[derive(Clone, Debug)]
pub struct FusionProblem {
    /// Cost of choosing the rigid proposal (background), per pixel.
    pub unary: ScalarMap,
    pub pairwise: EdgeWeightMap,
    /// Pixels outside are fixed to background.
    pub initial: MaskMap,
    pub rigid: VectorMap,
    pub nonrigid: VectorMap,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub flow: VectorMap,
    pub mask: MaskMap,
    pub energy: f64,
    /// Energy with every free pixel on the rigid proposal.
    pub energy_rigid: f64,
    /// Energy with every free pixel on the non-rigid proposal.
    pub energy_nonrigid: f64,
}

impl FusionProblem {
    pub fn mrf(&self) -> BinaryMrf {
        let fixed = self.initial.map(|&m| if m { None } else { Some(false) });
        BinaryMrf::from_background_costs(&self.unary, self.pairwise.clone()).with_fixed(fixed)
    }
}

pub fn fuse(problem: &FusionProblem) -> Result<Fusion> {
    let (w, h) = problem.unary.dims();
    let mrf = problem.mrf();
    let all_rigid = Grid::new(w, h, false);
    let energy_rigid = mrf.energy(&all_rigid);
    let energy_nonrigid = mrf.energy(&problem.initial);
    let (mask, energy) = if problem.initial.any() {
        let (m, _) = min_cut(&mrf)?;
        let e = mrf.energy(&m);
        // The cut is optimal up to its flow tolerance; never return a
        // labeling that round-off left above either proposal.
        if e > energy_rigid.min(energy_nonrigid) {
            if energy_rigid <= energy_nonrigid {
                (all_rigid, energy_rigid)
            } else {
                (problem.initial.clone(), energy_nonrigid)
            }
        } else {
            (m, e)
        }
    } else {
        (all_rigid, energy_rigid)
    };
    let flow = Grid::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            problem.nonrigid.get(x, y)
        } else {
            problem.rigid.get(x, y)
        }
    });
    Ok(Fusion {
        flow,
        mask,
        energy,
        energy_rigid,
        energy_nonrigid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::grid::binomial_blur(&Grid::from_fn(w, h, |_, _| rng.random::<f64>()))
    }

    #[test]
    fn unary_cases() {
        let p = SegParams::default();
        let a = texture(30, 20, 1);
        let b = Grid::from_fn(30, 20, |x, y| a.get_clamped(x as isize - 2, y as isize));
        let all = Grid::new(30, 20, true);
        let ones = Grid::new(30, 20, 1.0);
        let f = Grid::new(30, 20, Vector2::new(2.0, 0.0));
        // Equal proposals: no photometric preference, flow term at -lambda_flo.
        let t = fusion_unaries(&a, &b, &f, &f, &all, &all, &ones, &p);
        assert_eq!(t.ncc.get(10, 10), 0.0);
        assert_relative_eq!(t.flo.get(10, 10), -4.0);
        // Rigid target out of view: both terms vanish.
        let out = Grid::new(30, 20, Vector2::new(100.0, 0.0));
        let t = fusion_unaries(&a, &b, &out, &f, &all, &all, &ones, &p);
        assert_eq!((t.ncc.get(10, 10), t.flo.get(10, 10)), (0.0, 0.0));
        // Inconsistent non-rigid vector: both terms vanish.
        let t = fusion_unaries(&a, &b, &f, &f, &Grid::new(30, 20, false), &all, &ones, &p);
        assert_eq!((t.ncc.get(10, 10), t.flo.get(10, 10)), (0.0, 0.0));
        // Rigid matching better by a TNCC margin.
        let zero = Grid::new(30, 20, Vector2::zeros());
        let t = fusion_unaries(&a, &b, &f, &zero, &all, &all, &ones, &p);
        let margin = tncc(&a, (10, 10), &b, Point2::new(10.0, 10.0), 1.0) - tncc(&a, (10, 10), &b, Point2::new(12.0, 10.0), 1.0);
        assert_relative_eq!(t.ncc.get(10, 10), -4.0 * margin, epsilon = 1e-12);
        assert!(t.ncc.get(10, 10) < 0.0);
    }

    #[test]
    fn empty_initial_mask_is_all_rigid() {
        let rigid = Grid::new(8, 6, Vector2::new(1.0, 2.0));
        let problem = FusionProblem {
            unary: Grid::new(8, 6, 5.0),
            pairwise: EdgeWeightMap::uniform(8, 6, 1.0),
            initial: Grid::new(8, 6, false),
            rigid: rigid.clone(),
            nonrigid: Grid::new(8, 6, Vector2::new(f64::NAN, f64::NAN)),
        };
        let f = fuse(&problem).unwrap();
        assert!(!f.mask.any());
        assert_eq!(f.flow, rigid);
    }

    #[test]
    fn fused_energy_bounds_and_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let (w, h) = (12, 9);
            let initial = Grid::from_fn(w, h, |_, _| rng.random_bool(0.5));
            let unary = Grid::from_fn(w, h, |_, _| rng.random_range(-3.0..3.0));
            let wt: f64 = rng.random_range(0.0..2.0);
            let problem = FusionProblem {
                unary,
                pairwise: EdgeWeightMap::uniform(w, h, wt),
                initial: initial.clone(),
                rigid: Grid::new(w, h, Vector2::new(0.0, 0.0)),
                nonrigid: Grid::new(w, h, Vector2::new(5.0, 1.0)),
            };
            let f = fuse(&problem).unwrap();
            assert!(f.energy <= f.energy_rigid + 1e-9 && f.energy <= f.energy_nonrigid + 1e-9);
            for i in 0..w * h {
                if !initial.data()[i] {
                    assert!(!f.mask.data()[i]);
                }
                let expect = if f.mask.data()[i] { Vector2::new(5.0, 1.0) } else { Vector2::zeros() };
                assert_eq!(f.flow.data()[i], expect);
            }
        }
    }

    #[test]
    fn moving_square_is_selected() {
        let (w, h) = (60, 40);
        let bg = texture(w, h, 3);
        let fg = texture(w, h, 4);
        let inside = |x: isize, y: isize| (20..40).contains(&x) && (10..30).contains(&y);
        let a = Grid::from_fn(w, h, |x, y| if inside(x as isize, y as isize) { fg.get(x, y) } else { bg.get(x, y) });
        let b = Grid::from_fn(w, h, |x, y| {
            let (sx, sy) = (x as isize - 5, y as isize);
            if inside(sx, sy) {
                fg.get(sx as usize, sy as usize)
            } else {
                bg.get(x, y)
            }
        });
        let truth = Grid::from_fn(w, h, |x, y| inside(x as isize, y as isize));
        // Initial mask overshoots the square by 4 px.
        let initial = truth.dilate(4);
        let rigid = Grid::new(w, h, Vector2::zeros());
        // The non-rigid proposal is right on the square and on the static ring.
        let nonrigid = Grid::from_fn(w, h, |x, y| match (truth.get(x, y), initial.get(x, y)) {
            (true, _) => Vector2::new(5.0, 0.0),
            (false, true) => Vector2::zeros(),
            _ => Vector2::new(f64::NAN, f64::NAN),
        });
        let p = SegParams::default();
        let wv = crate::segmentation::variance_weight(&a, p.tau_w);
        let t = fusion_unaries(&a, &b, &rigid, &nonrigid, &initial, &initial, &wv, &p);
        let unary = Grid::from_fn(w, h, |x, y| t.ncc.get(x, y) + t.flo.get(x, y));
        let problem = FusionProblem {
            unary,
            pairwise: EdgeWeightMap::uniform(w, h, 1.0),
            initial,
            rigid,
            nonrigid,
        };
        let f = fuse(&problem).unwrap();
        assert!(f.mask.iou(&truth) > 0.8, "{}", f.mask.iou(&truth));
        assert_eq!(f.flow.get(30, 20), Vector2::new(5.0, 0.0));
        assert_eq!(f.flow.get(5, 5), Vector2::zeros());
    }
}
