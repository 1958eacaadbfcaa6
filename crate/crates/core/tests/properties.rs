//! Property tests for the algebraic invariants of the building blocks.

use nalgebra::{Point2, Vector2, Vector3};
use proptest::prelude::*;

use stereoflow::edges::EdgeWeightMap;
use stereoflow::flow::{
    component_masks, connected_components, estimate_range, forward_backward_check, weighted_median, FeatureMatch,
    FlowParams,
};
use stereoflow::fusion::{fuse, FusionProblem};
use stereoflow::geometry::warp;
use stereoflow::matching::{ncc_of_patches, stereo_cost_volume, tncc_from_ncc, CostVolume, LabelSpace};
use stereoflow::maxflow::{min_cut, BinaryMrf};
use stereoflow::pipeline::io::{decode_disparity, decode_flow, encode_disparity, encode_flow};
use stereoflow::pipeline::metrics::{disparity_correct, flow_correct};
use stereoflow::segmentation::{ground_prior, smooth_costs, SegParams};
use stereoflow::sgm::{self, SgmParams};
use stereoflow::stereo::{blend_cost, reduce_range};
use stereoflow::{Grid, Intrinsics, Pose, StereoRig};

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        -0.2f64..0.2,
        prop::array::uniform3(-0.5f64..0.5),
    )
        .prop_filter("axis", |(a, _, _)| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|(a, angle, t)| {
            let r = Pose::from_axis_angle(Vector3::from(a), angle);
            Pose::new(r.r, Vector3::from(t))
        })
}

fn rig() -> StereoRig {
    StereoRig::new(Intrinsics::new(500.0, 320.0, 120.0), 0.5, 640, 240)
}

fn grid_strategy<T: std::fmt::Debug + Clone>(
    w: usize,
    h: usize,
    s: impl Strategy<Value = T>,
) -> impl Strategy<Value = Grid<T>> {
    prop::collection::vec(s, w * h).prop_map(move |v| Grid::from_vec(w, h, v))
}

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = Grid<bool>> {
    grid_strategy(w, h, any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn ncc_is_symmetric_bounded_and_affine_invariant(
        pa in prop::collection::vec(0.0f64..1.0, 9),
        pb in prop::collection::vec(0.0f64..1.0, 9),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let n = ncc_of_patches(&pa, &pb);
        prop_assert!((-1.0..=1.0).contains(&n));
        prop_assert!((n - ncc_of_patches(&pb, &pa)).abs() < 1e-12);
        let scaled: Vec<f64> = pb.iter().map(|v| a * v + b).collect();
        let var = |p: &[f64]| {
            let m = p.iter().sum::<f64>() / p.len() as f64;
            p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / p.len() as f64
        };
        if var(&pa) > 1e-4 && var(&pb) > 1e-4 {
            prop_assert!((ncc_of_patches(&pa, &scaled) - n).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_cost_stays_in_range(v in prop::option::of(-1.0f64..=1.0), tau in 0.01f64..2.0) {
        let c = tncc_from_ncc(v, tau);
        prop_assert!((0.0..=tau).contains(&c));
    }

    #[test]
    fn stereo_costs_stay_in_range(
        left in grid_strategy(12, 7, 0.0f64..1.0),
        right in grid_strategy(12, 7, 0.0f64..1.0),
        tau in 0.1f64..1.5,
    ) {
        let vol = stereo_cost_volume(&left, &right, 5, tau);
        for &c in vol.data() {
            prop_assert!(c >= 0.0 && c as f64 <= tau + 1e-6);
        }
    }

    #[test]
    fn pose_algebra_keeps_rotations_orthonormal(a in pose_strategy(), b in pose_strategy()) {
        prop_assert!(a.compose(&b).orthonormality_error() < 1e-9);
        prop_assert!(a.inverse().orthonormality_error() < 1e-9);
        let id = a.compose(&a.inverse());
        prop_assert!(id.r.iter().zip(nalgebra::Matrix3::<f64>::identity().iter()).all(|(x, y)| (x - y).abs() < 1e-9));
        prop_assert!(id.t.norm() < 1e-9);
    }

    #[test]
    fn warps_compose_and_invert(
        a in pose_strategy(),
        b in pose_strategy(),
        x in 0.0f64..640.0,
        y in 0.0f64..240.0,
        d in 5.0f64..60.0,
    ) {
        let rig = rig();
        let p = Point2::new(x, y);
        let first = warp(p, d, &rig, &a);
        prop_assume!(first.in_front && first.disparity > 0.0);
        let second = warp(first.point, first.disparity, &rig, &b);
        let direct = warp(p, d, &rig, &b.compose(&a));
        prop_assume!(second.in_front);
        prop_assert!((second.point - direct.point).norm() < 1e-6 * (1.0 + direct.point.coords.norm()));
        prop_assert!((second.disparity - direct.disparity).abs() < 1e-9 * (1.0 + d));
        let back = warp(first.point, first.disparity, &rig, &a.inverse());
        prop_assert!((back.point - p).norm() < 1e-6);
        prop_assert!((back.disparity - d).abs() < 1e-9 * d);
    }

    #[test]
    fn sgm_uncertainty_is_non_negative(
        data in prop::collection::vec(0.0f32..1.0, 6 * 4 * 5),
    ) {
        let vol = CostVolume::from_vec(6, 4, LabelSpace::disparity(4), 1.0, data);
        let res = sgm::solve(&vol, &SgmParams::default(), None);
        for &u in res.uncertainty.iter() {
            prop_assert!(!(u < 0.0), "uncertainty {u}");
        }
    }

    #[test]
    fn min_cut_matches_exhaustive_search(
        bg in grid_strategy(3, 3, 0.0f64..2.0),
        fg in grid_strategy(3, 3, 0.0f64..2.0),
        weights in prop::collection::vec(0.0f64..1.0, 64),
    ) {
        let pairwise = EdgeWeightMap::from_fn(3, 3, |p, q| {
            let (i, j) = (p.1 * 3 + p.0, q.1 * 3 + q.0);
            weights[(i.min(j) * 7 + i.max(j)) % 64]
        });
        let mrf = BinaryMrf::new(bg, fg, pairwise);
        let (mask, e) = min_cut(&mrf).unwrap();
        prop_assert!((mrf.energy(&mask) - e).abs() < 1e-9);
        let best = (0u32..512)
            .map(|bits| mrf.energy(&Grid::from_fn(3, 3, |x, y| bits >> (y * 3 + x) & 1 == 1)))
            .fold(f64::INFINITY, f64::min);
        prop_assert!(e <= best + 1e-9, "cut {e} exhaustive {best}");
    }

    #[test]
    fn raising_a_foreground_cost_never_grows_the_foreground(
        bg in grid_strategy(5, 4, 0.0f64..2.0),
        fg in grid_strategy(5, 4, 0.0f64..2.0),
        w in 0.0f64..1.5,
        at in 0usize..20,
        bump in 0.01f64..3.0,
    ) {
        let pairwise = EdgeWeightMap::uniform(5, 4, w);
        let (before, _) = min_cut(&BinaryMrf::new(bg.clone(), fg.clone(), pairwise.clone())).unwrap();
        let mut raised = fg;
        let (x, y) = (at % 5, at / 5);
        raised.set(x, y, raised.get(x, y) + bump);
        let (after, _) = min_cut(&BinaryMrf::new(bg, raised, pairwise)).unwrap();
        for (a, b) in after.iter().zip(before.iter()) {
            prop_assert!(!a || *b);
        }
    }

    #[test]
    fn fusion_takes_one_proposal_per_pixel(
        unary in grid_strategy(6, 5, -1.0f64..1.0),
        initial in mask_strategy(6, 5),
        w in 0.0f64..0.5,
    ) {
        let rigid = Grid::from_fn(6, 5, |x, _| Vector2::new(x as f64, 0.0));
        let nonrigid = Grid::from_fn(6, 5, |_, y| Vector2::new(-1.0, y as f64 + 0.5));
        let problem = FusionProblem {
            unary,
            pairwise: EdgeWeightMap::uniform(6, 5, w),
            initial: initial.clone(),
            rigid: rigid.clone(),
            nonrigid: nonrigid.clone(),
        };
        let f = fuse(&problem).unwrap();
        prop_assert!(f.energy <= f.energy_rigid.min(f.energy_nonrigid) + 1e-9);
        for y in 0..5 {
            for x in 0..6 {
                if !initial.get(x, y) {
                    prop_assert!(!f.mask.get(x, y));
                }
                let want = if f.mask.get(x, y) { nonrigid.get(x, y) } else { rigid.get(x, y) };
                prop_assert_eq!(f.flow.get(x, y), want);
            }
        }
    }

    #[test]
    fn blend_is_convex(b in 0.0f64..2.0, avg in 0.0f64..2.0, alpha in 0.0f64..=1.0) {
        let c = blend_cost(b, avg, alpha);
        prop_assert!(c >= b.min(avg) - 1e-12 && c <= b.max(avg) + 1e-12);
    }

    #[test]
    fn reduced_range_keeps_the_mode(
        disparity in grid_strategy(10, 8, prop_oneof![0.0f64..80.0, Just(f64::NAN)]),
        occlusion in mask_strategy(10, 8),
    ) {
        let max = 100;
        let r = reduce_range(&disparity, &occlusion, max);
        prop_assert!(r <= max);
        let mut hist = vec![0usize; max + 1];
        for (d, &o) in disparity.iter().zip(occlusion.iter()) {
            if !o && d.is_finite() {
                hist[d.round() as usize] += 1;
            }
        }
        let top = *hist.iter().max().unwrap();
        if top > 0 {
            let mode = hist.iter().position(|&c| c == top).unwrap();
            prop_assert!(r >= mode, "range {r} mode {mode}");
        }
    }

    #[test]
    fn superpixel_smoothing_preserves_the_mean(
        costs in grid_strategy(9, 7, -5.0f64..5.0),
        labels in grid_strategy(9, 7, 0u32..6),
    ) {
        let s = smooth_costs(&costs, &labels);
        let total: f64 = costs.iter().sum();
        prop_assert!((s.iter().sum::<f64>() - total).abs() < 1e-9);
        for (i, a) in labels.iter().enumerate() {
            for (j, b) in labels.iter().enumerate() {
                if a == b {
                    prop_assert_eq!(s.data()[i], s.data()[j]);
                }
            }
        }
    }

    #[test]
    fn ground_prior_is_never_positive(
        a in -0.02f64..0.02,
        b in 0.05f64..0.5,
        c in -20.0f64..0.0,
        noise in grid_strategy(24, 16, -3.0f64..3.0),
        seed in any::<u64>(),
    ) {
        let disparity = Grid::from_fn(24, 16, |x, y| {
            let d = a * x as f64 + b * y as f64 + c + noise.get(x, y);
            if d > 0.0 { d } else { f64::NAN }
        });
        let prior = ground_prior(&disparity, 64.0, &SegParams::default(), seed);
        for &v in prior.iter() {
            prop_assert!(v <= 0.0);
        }
    }

    #[test]
    fn weighted_median_is_an_input_balancing_the_weights(
        items in prop::collection::vec((-10.0f64..10.0, 0.01f64..5.0), 1..20),
    ) {
        let m = weighted_median(items.clone()).unwrap();
        prop_assert!(items.iter().any(|(v, _)| *v == m));
        let total: f64 = items.iter().map(|i| i.1).sum();
        let below: f64 = items.iter().filter(|i| i.0 < m).map(|i| i.1).sum();
        let above: f64 = items.iter().filter(|i| i.0 > m).map(|i| i.1).sum();
        prop_assert!(below <= 0.5 * total + 1e-9);
        prop_assert!(above <= 0.5 * total + 1e-9);
    }

    #[test]
    fn range_contains_the_feature_displacements(
        feats in prop::collection::vec((0usize..20, 0usize..15, -30.0f64..30.0, -30.0f64..30.0), 1..12),
        rigid_u in -40.0f64..40.0,
    ) {
        let component = Grid::new(20, 15, true);
        let features: Vec<FeatureMatch> = feats
            .iter()
            .map(|&(x, y, u, v)| FeatureMatch {
                at: Point2::new(x as f64, y as f64),
                displacement: Vector2::new(u, v),
            })
            .collect();
        let rigid = Grid::new(20, 15, Vector2::new(rigid_u, 0.0));
        let r = estimate_range(&component, &features, None, &rigid, &FlowParams::default());
        for f in &features {
            prop_assert!(r.contains(f.displacement.x, f.displacement.y), "{:?} {:?}", r, f);
        }
        prop_assert!(r.contains(rigid_u, 0.0));
    }

    #[test]
    fn components_partition_the_mask(mask in mask_strategy(10, 8)) {
        let (labels, n) = connected_components(&mask);
        let parts = component_masks(&mask);
        prop_assert_eq!(parts.len(), n);
        for y in 0..8 {
            for x in 0..10 {
                let owners = parts.iter().filter(|m| m.get(x, y)).count();
                prop_assert_eq!(owners, usize::from(mask.get(x, y)));
                let Some(l) = labels.get(x, y) else { continue };
                for (dx, dy) in [(1isize, 0isize), (0, 1), (1, 1), (-1, 1)] {
                    let (qx, qy) = (x as isize + dx, y as isize + dy);
                    if mask.contains(qx, qy) {
                        if let Some(k) = labels.get(qx as usize, qy as usize) {
                            prop_assert_eq!(k, l);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn forward_backward_check_is_symmetric_for_integer_flows(
        fwd in grid_strategy(8, 6, (-3i32..=3, -3i32..=3)),
        bwd in grid_strategy(8, 6, (-3i32..=3, -3i32..=3)),
    ) {
        let to_map = |g: &Grid<(i32, i32)>| g.map(|&(u, v)| Vector2::new(u as f64, v as f64));
        let (f, b) = (to_map(&fwd), to_map(&bwd));
        let all = Grid::new(8, 6, true);
        let ok_f = forward_backward_check(&f, &b, &all, 0.5);
        let ok_b = forward_backward_check(&b, &f, &all, 0.5);
        for y in 0..6 {
            for x in 0..8 {
                if ok_f.get(x, y) {
                    let v = f.get(x, y);
                    let (qx, qy) = ((x as f64 + v.x) as usize, (y as f64 + v.y) as usize);
                    prop_assert!(ok_b.get(qx, qy));
                }
            }
        }
    }

    #[test]
    fn codecs_round_trip_within_quantization(d in 0.01f64..250.0, u in -400.0f64..400.0, v in -400.0f64..400.0) {
        prop_assert!((decode_disparity(encode_disparity(d)) - d).abs() <= 0.5 / 256.0 + 1e-12);
        let f = decode_flow(encode_flow(Vector2::new(u, v)));
        prop_assert!((f.x - u).abs() <= 0.5 / 64.0 + 1e-12 && (f.y - v).abs() <= 0.5 / 64.0 + 1e-12);
        prop_assert!(decode_disparity(encode_disparity(f64::NAN)).is_nan());
        prop_assert!(decode_flow(encode_flow(Vector2::new(f64::NAN, 0.0))).x.is_nan());
    }

    #[test]
    fn outlier_rule_uses_both_thresholds(gt in 0.5f64..200.0, err in -30.0f64..30.0, angle in 0.0f64..6.3) {
        let want = err.abs() < 3.0 || err.abs() < 0.05 * gt;
        prop_assert_eq!(disparity_correct(gt + err, gt), Some(want));
        prop_assert_eq!(disparity_correct(f64::NAN, gt), Some(false));
        prop_assert_eq!(disparity_correct(1.0, f64::NAN), None);
        let g = Vector2::new(gt, 0.0);
        let e = g + Vector2::new(angle.cos(), angle.sin()) * err.abs();
        prop_assert_eq!(flow_correct(e, g), Some((e - g).norm() < 3.0 || (e - g).norm() < 0.05 * gt));
    }
}
