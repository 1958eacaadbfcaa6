use stereoflow::pipeline::{run_sequence, Config, FrameOutput, PairInput, Pipeline};
use stereoflow::synthetic::{PlaneSpec, SceneSpec, Sequence};
use stereoflow::{Grid, StereoRig};

fn pairs(seq: &Sequence) -> Vec<PairInput> {
    seq.frames
        .iter()
        .map(|f| PairInput {
            left: f.left.clone(),
            right: f.right.clone(),
            prior_flow: None,
        })
        .collect()
}

fn run(seq: &Sequence) -> Vec<FrameOutput> {
    run_sequence(pairs(seq), &seq.rig, &Config::default()).unwrap()
}

fn bits(f: &FrameOutput) -> Vec<u64> {
    let mut v: Vec<u64> = f.disparity.iter().map(|x| x.to_bits()).collect();
    v.extend(f.disparity_next.iter().map(|x| x.to_bits()));
    v.extend(f.flow.iter().flat_map(|x| [x.x.to_bits(), x.y.to_bits()]));
    v.extend(f.mask.iter().map(|&m| m as u64));
    v.extend(f.pose.to_row_major().iter().map(|x| x.to_bits()));
    v
}

#[test]
fn static_scene_has_no_movers() {
    let mut spec = SceneSpec::mover_demo(160, 96, 3);
    spec.movers.clear();
    let seq = spec.render().unwrap();
    let out = run(&seq);
    assert_eq!(out.len(), 2);
    for o in &out {
        let truth = seq.truth[o.index].motion.as_ref().unwrap();
        assert!(o.fallback.is_none(), "{:?}", o.fallback);
        assert!(!o.mask.any(), "frame {}: {} mask pixels", o.index, o.mask.count());
        let err = o.pose.compose(&truth.pose.inverse());
        assert!(err.rotation_angle().to_degrees() < 0.1);
        assert!(err.t.norm() < 0.01 * 12.0);
        let (mut sum, mut n) = (0.0, 0);
        for (e, g) in o.flow.iter().zip(truth.flow.iter()) {
            if g.x.is_finite() && e.x.is_finite() {
                sum += (e - g).norm();
                n += 1;
            }
        }
        assert!(sum / (n as f64) < 0.5, "static EPE {}", sum / n as f64);
    }
}

#[test]
fn first_frame_runs_without_history() {
    let seq = SceneSpec::mover_demo(160, 96, 2).render().unwrap();
    let mut p = Pipeline::new(seq.rig, Config::default()).unwrap();
    let ps = pairs(&seq);
    assert!(p.push(ps[0].clone()).unwrap().is_none());
    assert!(p.state().prev_mask.is_none() && p.state().colors.mean().is_none());
    let o = p.push(ps[1].clone()).unwrap().unwrap();
    assert_eq!(o.index, 0);
    assert!(o.fallback.is_none(), "{:?}", o.fallback);
    let e = o.fusion.unwrap();
    assert!(e.fused <= e.rigid && e.fused <= e.nonrigid);
    assert_eq!(o.disparity.dims(), (160, 96));
    assert_eq!(o.flow.dims(), (160, 96));
    assert_eq!(o.mask.dims(), (160, 96));
}

#[test]
fn constant_disparity_round_trips_through_working_scale() {
    let mut spec = SceneSpec::planes_demo(160, 96);
    let f = spec.camera.f;
    spec.planes = vec![PlaneSpec {
        center: [0.0, 0.0, 10.0],
        axis_u: [1.0, 0.0, 0.0],
        axis_v: [0.0, 1.0, 0.0],
        unbounded: true,
        texel: stereoflow::synthetic::texel_for(f, 10.0),
        seed: 5,
        tint: [1.0, 1.0, 1.0],
    }];
    let seq = spec.render().unwrap();
    let d_true = seq.rig.disparity(10.0);
    let out = run(&seq);
    let d = &out[0].disparity;
    // Columns left of the true disparity have no match in the right view.
    let margin = d_true.ceil() as usize + 4;
    let (mut worst, mut valid, mut total) = (0.0f64, 0, 0);
    for y in 4..96 - 4 {
        for x in margin..160 - 4 {
            total += 1;
            let v = d.get(x, y);
            if v.is_finite() {
                valid += 1;
                worst = worst.max((v - d_true).abs());
            }
        }
    }
    assert!(valid as f64 > 0.95 * total as f64, "{valid} of {total} valid");
    assert!(worst < 0.5, "worst disparity error {worst}");
}

#[test]
fn outputs_do_not_depend_on_later_frames() {
    let seq = SceneSpec::mover_demo(160, 96, 5).render().unwrap();
    let a = run(&seq);
    let mut altered = seq.clone();
    let last = altered.frames.last_mut().unwrap();
    last.left = last.left.map(|c| [1.0 - c[0], c[1], c[2]]);
    last.right = Grid::new(160, 96, [0.5; 3]);
    let b = run(&altered);
    assert_eq!((a.len(), b.len()), (4, 4));
    for t in 0..3 {
        assert_eq!(bits(&a[t]), bits(&b[t]), "frame {t}");
    }
    assert_ne!(bits(&a[3]), bits(&b[3]));
}

#[test]
fn mismatched_images_are_rejected() {
    let seq = SceneSpec::mover_demo(160, 96, 2).render().unwrap();
    let rig = StereoRig { width: 150, ..seq.rig };
    assert!(run_sequence(pairs(&seq), &rig, &Config::default()).is_err());
    let mut bad = Config::default();
    bad.flow_scale = 0.0;
    assert!(Pipeline::new(seq.rig, bad).is_err());
}
