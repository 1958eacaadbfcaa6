//! Ray-traced synthetic stereo sequences with exact ground truth.
//!
//! World coordinates are the left camera frame of frame 0. The camera moves
//! by the same relative motion every frame: a point with camera-`k`
//! coordinates `x` has camera-`k+1` coordinates `motion * x`. Surfaces are
//! textured rectangles (or unbounded planes); movers additionally
//! translate and spin about their center every frame.

use nalgebra::{Point2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose, StereoRig};
use crate::grid::{ColorImage, Grid, MaskMap, ScalarMap, VectorMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub f: f64,
    /// Defaults to the image center.
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub baseline: f64,
}

/// Per-frame rigid motion; `rotation` is an axis-angle vector in radians.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
}

impl MotionSpec {
    pub fn pose(&self) -> Pose {
        let w = Vector3::from(self.rotation);
        let rot = if w.norm() > 0.0 {
            Pose::from_axis_angle(w, w.norm())
        } else {
            Pose::identity()
        };
        Pose::new(rot.r, Vector3::from(self.translation))
    }
}

/// A textured planar patch `center + a * axis_u + b * axis_v`, `a, b` in
/// `[-1, 1]` (any real when `unbounded`). The axes must be orthogonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub center: [f64; 3],
    pub axis_u: [f64; 3],
    pub axis_v: [f64; 3],
    #[serde(default)]
    pub unbounded: bool,
    /// Texture lattice spacing in scene units.
    pub texel: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "white")]
    pub tint: [f64; 3],
}

fn white() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoverSpec {
    pub surface: PlaneSpec,
    /// World translation per frame.
    #[serde(default)]
    pub velocity: [f64; 3],
    /// Axis-angle rotation per frame about the surface center.
    #[serde(default)]
    pub spin: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub camera: CameraSpec,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Amplitude of additive uniform noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Sub-pixel rays per axis averaged into each pixel color.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    #[serde(default)]
    pub motion: MotionSpec,
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub movers: Vec<MoverSpec>,
}

fn default_frames() -> usize {
    2
}

fn default_noise() -> f64 {
    0.01
}

fn default_supersample() -> usize {
    3
}

#[derive(Clone, Debug)]
pub struct StereoFrame {
    pub left: ColorImage,
    pub right: ColorImage,
}

/// Ground truth of a frame towards the next one.
#[derive(Clone, Debug)]
pub struct MotionTruth {
    /// `NaN` where the point leaves the front of the next camera.
    pub flow: VectorMap,
    /// Disparity of the same surface point in the next left camera.
    pub disparity_next: ScalarMap,
    /// Camera motion `t -> t+1`.
    pub pose: Pose,
}

#[derive(Clone, Debug)]
pub struct FrameTruth {
    /// `NaN` where no surface is hit.
    pub disparity: ScalarMap,
    /// Pixels showing a mover.
    pub mask: MaskMap,
    /// Absent for the last frame.
    pub motion: Option<MotionTruth>,
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub rig: StereoRig,
    pub frames: Vec<StereoFrame>,
    pub truth: Vec<FrameTruth>,
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidScene(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn rig(&self) -> StereoRig {
        let c = &self.camera;
        let cx = c.cx.unwrap_or((self.width as f64 - 1.0) / 2.0);
        let cy = c.cy.unwrap_or((self.height as f64 - 1.0) / 2.0);
        StereoRig::new(Intrinsics::new(c.f, cx, cy), c.baseline, self.width, self.height)
    }

    /// Camera `k` from world coordinates.
    pub fn camera_pose(&self, k: usize) -> Pose {
        let m = self.motion.pose();
        (0..k).fold(Pose::identity(), |acc, _| m.compose(&acc))
    }

    fn surfaces_at(&self, k: usize) -> Vec<Surface> {
        let mut out: Vec<Surface> = self
            .planes
            .iter()
            .map(|p| Surface::new(p, Pose::from_translation(Vector3::from(p.center)), None))
            .collect();
        for (i, m) in self.movers.iter().enumerate() {
            out.push(Surface::new(&m.surface, mover_pose(m, k), Some(i)));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::InvalidScene("empty image or sequence".into()));
        }
        if !(self.camera.f > 0.0) || !(self.camera.baseline > 0.0) {
            return Err(Error::InvalidScene("focal length and baseline must be positive".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::InvalidScene("noise must be non-negative".into()));
        }
        for p in self.planes.iter().chain(self.movers.iter().map(|m| &m.surface)) {
            let u = Vector3::from(p.axis_u);
            let v = Vector3::from(p.axis_v);
            if u.norm() == 0.0 || v.norm() == 0.0 || u.dot(&v).abs() > 1e-9 * u.norm() * v.norm() {
                return Err(Error::InvalidScene("surface axes must be non-zero and orthogonal".into()));
            }
            if !(p.texel > 0.0) {
                return Err(Error::InvalidScene("texel size must be positive".into()));
            }
        }
        let lr = self.rig().left_to_right();
        for k in 0..self.frames {
            let cam = self.camera_pose(k);
            for s in self.surfaces_at(k) {
                for view in [cam, lr.compose(&cam)] {
                    let probes: Vec<Vector3<f64>> = if s.unbounded {
                        vec![s.center]
                    } else {
                        vec![
                            s.center + s.u + s.v,
                            s.center + s.u - s.v,
                            s.center - s.u + s.v,
                            s.center - s.u - s.v,
                        ]
                    };
                    if probes.iter().any(|x| view.transform(x).z <= 0.0) {
                        return Err(Error::InvalidScene(format!("surface behind camera in frame {k}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Render every frame and its ground truth.
    pub fn render(&self) -> Result<Sequence> {
        self.validate()?;
        let rig = self.rig();
        let lr = rig.left_to_right();
        let mut frames = Vec::with_capacity(self.frames);
        let mut truth = Vec::with_capacity(self.frames);
        for k in 0..self.frames {
            let cam = self.camera_pose(k);
            let surfaces = self.surfaces_at(k);
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (left, hits) = render_view(&rig, &cam, &surfaces, self.supersample);
            let (right, _) = render_view(&rig, &lr.compose(&cam), &surfaces, self.supersample);
            let left = add_noise(left, self.noise, &mut rng);
            let right = add_noise(right, self.noise, &mut rng);
            let disparity = hits.map(|h| h.as_ref().map_or(f64::NAN, |h| rig.disparity(h.depth)));
            let mask = hits.map(|h| h.as_ref().is_some_and(|h| h.mover.is_some()));
            let motion = (k + 1 < self.frames).then(|| self.motion_truth(&rig, k, &hits));
            frames.push(StereoFrame { left, right });
            truth.push(FrameTruth {
                disparity,
                mask,
                motion,
            });
        }
        Ok(Sequence { rig, frames, truth })
    }

    fn motion_truth(&self, rig: &StereoRig, k: usize, hits: &Grid<Option<Hit>>) -> MotionTruth {
        let cam_next = self.camera_pose(k + 1);
        let step: Vec<Pose> = self
            .movers
            .iter()
            .map(|m| mover_pose(m, k + 1).compose(&mover_pose(m, k).inverse()))
            .collect();
        let k_int = &rig.intrinsics;
        let nan2 = Vector2::new(f64::NAN, f64::NAN);
        let (w, h) = hits.dims();
        let mut flow = Grid::new(w, h, nan2);
        let mut disparity_next = Grid::new(w, h, f64::NAN);
        for y in 0..h {
            for x in 0..w {
                let Some(hit) = hits[(x, y)].as_ref() else { continue };
                let world = match hit.mover {
                    Some(i) => step[i].transform(&hit.world),
                    None => hit.world,
                };
                let c = cam_next.transform(&world);
                if c.z <= 0.0 {
                    continue;
                }
                let q = k_int.project(&c);
                flow.set(x, y, Vector2::new(q.x - x as f64, q.y - y as f64));
                disparity_next.set(x, y, rig.disparity(c.z));
            }
        }
        MotionTruth {
            flow,
            disparity_next,
            pose: self.motion.pose(),
        }
    }

    /// Static textured scene of three fronto-parallel and slanted planes.
    pub fn planes_demo(width: usize, height: usize) -> Self {
        let f = 0.9 * width as f64;
        Self {
            width,
            height,
            camera: CameraSpec {
                f,
                cx: None,
                cy: None,
                baseline: 0.5,
            },
            frames: 2,
            noise: 0.01,
            seed: 1,
            supersample: 3,
            motion: MotionSpec::default(),
            planes: vec![
                PlaneSpec {
                    center: [0.0, 0.0, 30.0],
                    axis_u: [1.0, 0.0, 0.0],
                    axis_v: [0.0, 1.0, 0.0],
                    unbounded: true,
                    texel: texel_for(f, 30.0),
                    seed: 11,
                    tint: [0.9, 0.95, 1.0],
                },
                PlaneSpec {
                    center: [-3.0, 0.5, 12.0],
                    axis_u: [3.0, 0.0, 1.5],
                    axis_v: [0.0, 3.0, 0.0],
                    unbounded: false,
                    texel: texel_for(f, 12.0),
                    seed: 12,
                    tint: [1.0, 0.85, 0.7],
                },
                PlaneSpec {
                    center: [4.0, -0.5, 8.0],
                    axis_u: [1.6, 0.0, 0.0],
                    axis_v: [0.0, 1.2, 0.0],
                    unbounded: false,
                    texel: texel_for(f, 8.0),
                    seed: 13,
                    tint: [0.7, 1.0, 0.8],
                },
            ],
            movers: vec![],
        }
    }

    /// [`SceneSpec::planes_demo`] seen from a camera creeping forward, with
    /// one textured board crossing the view at about `0.02 * width` pixels
    /// per frame.
    pub fn mover_demo(width: usize, height: usize, frames: usize) -> Self {
        let mut s = Self::planes_demo(width, height);
        let f = s.camera.f;
        s.frames = frames;
        s.motion = MotionSpec {
            translation: [0.01, 0.0, -0.12],
            rotation: [0.0, 0.002, 0.0],
        };
        s.movers.push(MoverSpec {
            surface: PlaneSpec {
                center: [-1.2, 0.3, 10.0],
                axis_u: [1.4, 0.0, 0.0],
                axis_v: [0.0, 0.9, 0.0],
                unbounded: false,
                texel: texel_for(f, 10.0),
                seed: 21,
                tint: [1.0, 0.8, 0.8],
            },
            velocity: [0.22, 0.0, 0.0],
            spin: [0.0; 3],
        });
        s
    }
}

/// Texel size that projects to about 1.5 px at `depth`.
pub fn texel_for(f: f64, depth: f64) -> f64 {
    1.5 * depth / f
}

fn mover_pose(m: &MoverSpec, k: usize) -> Pose {
    let w = Vector3::from(m.spin) * k as f64;
    let rot = if w.norm() > 0.0 {
        Pose::from_axis_angle(w, w.norm())
    } else {
        Pose::identity()
    };
    Pose::new(rot.r, Vector3::from(m.surface.center) + Vector3::from(m.velocity) * k as f64)
}

/// A surface placed in world coordinates.
#[derive(Clone, Debug)]
struct Surface {
    center: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    normal: Vector3<f64>,
    unbounded: bool,
    texel: f64,
    seed: u64,
    tint: [f64; 3],
    mover: Option<usize>,
}

impl Surface {
    /// `pose` maps surface-local coordinates (center at origin) to world.
    fn new(spec: &PlaneSpec, pose: Pose, mover: Option<usize>) -> Self {
        let u = pose.r * Vector3::from(spec.axis_u);
        let v = pose.r * Vector3::from(spec.axis_v);
        Self {
            center: pose.t,
            u,
            v,
            normal: u.cross(&v),
            unbounded: spec.unbounded,
            texel: spec.texel,
            seed: spec.seed,
            tint: spec.tint,
            mover,
        }
    }
}

#[derive(Clone, Debug)]
struct Hit {
    depth: f64,
    world: Vector3<f64>,
    mover: Option<usize>,
    color: [f64; 3],
}

fn render_view(rig: &StereoRig, cam: &Pose, surfaces: &[Surface], supersample: usize) -> (ColorImage, Grid<Option<Hit>>) {
    let to_world = cam.inverse();
    let n = supersample.max(1);
    let trace = |x: f64, y: f64| -> Option<Hit> {
        let ray = rig.intrinsics.unproject(Point2::new(x, y));
        let dir = to_world.r * ray;
        let origin = to_world.t;
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for (i, s) in surfaces.iter().enumerate() {
            let denom = s.normal.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            // Camera depth equals the ray parameter since `ray.z == 1`.
            let t = s.normal.dot(&(s.center - origin)) / denom;
            if t <= 0.0 || best.is_some_and(|b| b.0 <= t) {
                continue;
            }
            let rel = origin + dir * t - s.center;
            let a = rel.dot(&s.u) / s.u.norm_squared();
            let b = rel.dot(&s.v) / s.v.norm_squared();
            if !s.unbounded && (a.abs() > 1.0 || b.abs() > 1.0) {
                continue;
            }
            best = Some((t, i, a, b));
        }
        best.map(|(t, i, a, b)| {
            let s = &surfaces[i];
            let tex = texture(s.seed, a * s.u.norm() / s.texel, b * s.v.norm() / s.texel);
            Hit {
                depth: t,
                world: origin + dir * t,
                mover: s.mover,
                color: [0, 1, 2].map(|c| (s.tint[c] * (0.1 + 0.9 * tex[c])).clamp(0.0, 1.0)),
            }
        })
    };
    let hits = Grid::par_from_fn(rig.width, rig.height, |x, y| trace(x as f64, y as f64));
    let img = Grid::par_from_fn(rig.width, rig.height, |x, y| {
        if n == 1 {
            return hits[(x, y)].as_ref().map_or([0.0; 3], |h| h.color);
        }
        let mut acc = [0.0; 3];
        for j in 0..n {
            for i in 0..n {
                let ox = (i as f64 + 0.5) / n as f64 - 0.5;
                let oy = (j as f64 + 0.5) / n as f64 - 0.5;
                if let Some(h) = trace(x as f64 + ox, y as f64 + oy) {
                    for c in 0..3 {
                        acc[c] += h.color[c];
                    }
                }
            }
        }
        acc.map(|v| v / (n * n) as f64)
    });
    (img, hits)
}

fn add_noise(mut img: ColorImage, amplitude: f64, rng: &mut ChaCha8Rng) -> ColorImage {
    if amplitude > 0.0 {
        for px in img.data_mut() {
            for c in px.iter_mut() {
                *c = (*c + rng.random_range(-amplitude..=amplitude)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn lattice_hash(seed: u64, i: i64, j: i64, channel: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64 ^ splitmix(channel))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Binomially smoothed lattice noise at lattice point `(i, j)`.
fn smoothed(seed: u64, i: i64, j: i64, channel: u64) -> f64 {
    const W: [f64; 3] = [0.25, 0.5, 0.25];
    let mut v = 0.0;
    for (a, wa) in W.iter().enumerate() {
        for (b, wb) in W.iter().enumerate() {
            v += wa * wb * lattice_hash(seed, i + a as i64 - 1, j + b as i64 - 1, channel);
        }
    }
    v
}

const OCTAVE_WEIGHTS: [f64; 4] = [0.45, 0.35, 0.25, 0.2];

fn lattice(seed: u64, s: f64, t: f64, channel: u64) -> f64 {
    let (i, j) = (s.floor() as i64, t.floor() as i64);
    let (fs, ft) = (s - s.floor(), t - t.floor());
    let v00 = smoothed(seed, i, j, channel);
    let v10 = smoothed(seed, i + 1, j, channel);
    let v01 = smoothed(seed, i, j + 1, channel);
    let v11 = smoothed(seed, i + 1, j + 1, channel);
    (1.0 - ft) * ((1.0 - fs) * v00 + fs * v10) + ft * ((1.0 - fs) * v01 + fs * v11)
}

/// Bilinearly interpolated smoothed noise summed over four octaves; per
/// channel a mix of a shared luminance pattern and a channel-specific one,
/// contrast-stretched to [0, 1].
pub fn texture(seed: u64, s: f64, t: f64) -> [f64; 3] {
    let norm = OCTAVE_WEIGHTS.iter().map(|w| w * w).sum::<f64>().sqrt();
    let sample = |channel: u64| {
        let mut v = 0.0;
        for (k, w) in OCTAVE_WEIGHTS.iter().enumerate() {
            let scale = (1u64 << k) as f64;
            v += w * (lattice(seed, s / scale, t / scale, channel + 4 * k as u64) - 0.5);
        }
        0.5 + v / norm
    };
    let lum = sample(3);
    [0u64, 1, 2].map(|c| {
        let v = 0.7 * lum + 0.3 * sample(c);
        (0.5 + (v - 0.5) * 3.0).clamp(0.0, 1.0)
    })
}
