use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use stereoflow::edges::{color_edge_weights, EdgeWeightMap};
use stereoflow::grid::Grid;
use stereoflow::matching::stereo_cost_volume;
use stereoflow::maxflow::{min_cut, BinaryMrf};
use stereoflow::odometry::{feature_init, VoParams};
use stereoflow::pipeline::{run_sequence, Config, PairInput};
use stereoflow::sgm::{self, SgmParams};
use stereoflow::stereo::{binocular, StereoParams, ViewEdges};
use stereoflow::synthetic::{SceneSpec, Sequence};

fn scene() -> Sequence {
    SceneSpec::planes_demo(320, 96).render().expect("render")
}

fn matching(c: &mut Criterion) {
    let seq = scene();
    let (l, r) = (seq.frames[0].left.to_gray(), seq.frames[0].right.to_gray());
    let mut g = c.benchmark_group("matching");
    g.sample_size(10);
    g.bench_function("stereo_cost_volume_320x96_d64", |b| {
        b.iter(|| stereo_cost_volume(black_box(&l), black_box(&r), 64, 0.5))
    });
    let vol = stereo_cost_volume(&l, &r, 64, 0.5);
    let edges = color_edge_weights(&seq.frames[0].left);
    g.bench_function("sgm_320x96_d64", |b| {
        b.iter(|| sgm::solve(black_box(&vol), &SgmParams::default(), Some(&edges)))
    });
    let params = StereoParams {
        max_disparity: 64,
        ..Default::default()
    };
    let er = color_edge_weights(&seq.frames[0].right);
    g.bench_function("binocular_320x96_d64", |b| {
        b.iter(|| {
            binocular(&l, &r, &params, ViewEdges { left: Some(&edges), right: Some(&er) })
        })
    });
    g.finish();
}

fn odometry(c: &mut Criterion) {
    let seq = scene();
    let rig = seq.rig;
    let (a, b) = (seq.frames[0].left.to_gray(), seq.frames[1].left.to_gray());
    let d = &seq.truth[0].disparity;
    let mut g = c.benchmark_group("odometry");
    g.sample_size(20);
    g.bench_function("feature_init_320x96", |bn| {
        bn.iter(|| feature_init(black_box(&a), black_box(&b), d, None, &rig, &VoParams::default()))
    });
    g.finish();
}

fn maxflow(c: &mut Criterion) {
    let (w, h) = (248usize, 75usize);
    let bg = Grid::from_fn(w, h, |x, y| ((x * 7 + y * 13) % 17) as f64 / 17.0 - 0.4);
    let fg = Grid::new(w, h, 0.0);
    let mrf = BinaryMrf::new(bg, fg, EdgeWeightMap::uniform(w, h, 0.3));
    c.bench_function("min_cut_248x75", |b| b.iter(|| min_cut(black_box(&mrf))));
}

fn frame(c: &mut Criterion) {
    let seq = SceneSpec::mover_demo(320, 96, 2).render().expect("render");
    let rig = seq.rig;
    let pairs: Vec<PairInput> = seq
        .frames
        .iter()
        .map(|f| PairInput {
            left: f.left.clone(),
            right: f.right.clone(),
            prior_flow: None,
        })
        .collect();
    let config = Config::default();
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("frame_320x96", |b| {
        b.iter(|| run_sequence(pairs.clone(), &rig, &config).expect("pipeline"))
    });
    g.finish();
}

criterion_group!(benches, matching, odometry, maxflow, frame);
criterion_main!(benches);
