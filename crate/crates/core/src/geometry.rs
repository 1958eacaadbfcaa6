//! Pinhole stereo rig, rigid poses and the disparity-driven rigid warp.

use nalgebra::{Matrix3, Matrix4, Point2, Point3, Rotation3, Vector2, Vector3, Vector6};

use crate::grid::{Grid, MaskMap, ScalarMap, VectorMap};

/// Target-frame disparity margin beyond which a competing projection occludes.
pub const ZBUFFER_TOLERANCE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(f: f64, cx: f64, cy: f64) -> Self {
        assert!(f > 0.0, "focal length must be positive");
        Self { f, cx, cy }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.f, 0.0, self.cx, 0.0, self.f, self.cy, 0.0, 0.0, 1.0)
    }

    /// Normalized ray `K^-1 (u, v, 1)`.
    #[inline]
    pub fn unproject(&self, p: Point2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.f, (p.y - self.cy) / self.f, 1.0)
    }

    #[inline]
    pub fn project(&self, x: &Vector3<f64>) -> Point2<f64> {
        Point2::new(self.f * x.x / x.z + self.cx, self.f * x.y / x.z + self.cy)
    }

    /// Intrinsics of an image resampled by `scale` (pixel-center convention).
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            f: self.f * scale,
            cx: (self.cx + 0.5) * scale - 0.5,
            cy: (self.cy + 0.5) * scale - 0.5,
        }
    }
}

/// Rigid motion `x' = R x + t` between two camera frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self { r, t }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            r: Matrix3::identity(),
            t,
        }
    }

    /// Rotation by `angle` radians about `axis`, no translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let rot = Rotation3::from_scaled_axis(axis.normalize() * angle);
        Self {
            r: *rot.matrix(),
            t: Vector3::zeros(),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: -(rt * self.t),
        }
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x + self.t
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    /// Row-major 3x4 `[R|t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 4 + j] = self.r[(i, j)];
            }
            out[i * 4 + 3] = self.t[i];
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Pose {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Pose::new(r, Vector3::new(v[3], v[7], v[11]))
    }

    /// SE(3) exponential of a twist `(v, w)`.
    pub fn exp(twist: &Vector6<f64>) -> Pose {
        let v = Vector3::new(twist[0], twist[1], twist[2]);
        let w = Vector3::new(twist[3], twist[4], twist[5]);
        let theta = w.norm();
        let wx = skew(&w);
        let (r, jac) = if theta < 1e-10 {
            (Matrix3::identity() + wx, Matrix3::identity() + 0.5 * wx)
        } else {
            let a = theta.sin() / theta;
            let b = (1.0 - theta.cos()) / (theta * theta);
            let c = (1.0 - a) / (theta * theta);
            let wx2 = wx * wx;
            (
                Matrix3::identity() + a * wx + b * wx2,
                Matrix3::identity() + b * wx + c * wx2,
            )
        };
        Pose { r, t: jac * v }
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Largest deviation of `R^T R` from identity plus `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let d = self.r.transpose() * self.r - Matrix3::identity();
        d.abs().max() + (self.r.determinant() - 1.0).abs()
    }

    /// Re-project the rotation onto SO(3).
    pub fn orthonormalized(&self) -> Pose {
        let svd = self.r.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose { r, t: self.t }
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert(a: &Pose) -> Pose {
    a.inverse()
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Calibrated, rectified stereo pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoRig {
    pub intrinsics: Intrinsics,
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

impl StereoRig {
    pub fn new(intrinsics: Intrinsics, baseline: f64, width: usize, height: usize) -> Self {
        assert!(baseline > 0.0, "baseline must be positive");
        Self {
            intrinsics,
            baseline,
            width,
            height,
        }
    }

    /// `[I | -B e_x]`.
    pub fn left_to_right(&self) -> Pose {
        Pose::from_translation(Vector3::new(-self.baseline, 0.0, 0.0))
    }

    /// `f * B`, the disparity-depth product.
    #[inline]
    pub fn fb(&self) -> f64 {
        self.intrinsics.f * self.baseline
    }

    pub fn depth(&self, disparity: f64) -> f64 {
        self.fb() / disparity
    }

    pub fn disparity(&self, depth: f64) -> f64 {
        self.fb() / depth
    }

    /// 3D point in camera coordinates. Requires `d > 0`.
    pub fn backproject(&self, p: Point2<f64>, d: f64) -> Point3<f64> {
        Point3::from(self.intrinsics.unproject(p) * (self.fb() / d))
    }

    /// The rig as seen on an image resampled by `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        let (width, height) = crate::grid::scaled_dims(self.width, self.height, scale);
        Self {
            intrinsics: self.intrinsics.scaled(scale),
            baseline: self.baseline,
            width,
            height,
        }
    }

    /// Rig for a grid of exactly `width x height` with the scale `width / self.width`.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let scale = width as f64 / self.width as f64;
        Self {
            intrinsics: self.intrinsics.scaled(scale),
            baseline: self.baseline,
            width,
            height,
        }
    }
}

/// Result of warping one pixel with its disparity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warped {
    pub point: Point2<f64>,
    /// Disparity of the same 3D point in the target camera.
    pub disparity: f64,
    /// False when the point lands on or behind the target camera plane.
    pub in_front: bool,
}

/// Homogeneous rigid warp of pixel `p` with disparity `d` under `pose`.
///
/// `d = 0` is the point at infinity; only the rotation acts on it.
#[inline]
pub fn warp(p: Point2<f64>, d: f64, rig: &StereoRig, pose: &Pose) -> Warped {
    let k = &rig.intrinsics;
    let ray = k.unproject(p);
    let w = d / rig.fb();
    let x = pose.r * ray + pose.t * w;
    let point = Point2::new(k.f * x.x / x.z + k.cx, k.f * x.y / x.z + k.cy);
    Warped {
        point,
        disparity: d / x.z,
        in_front: x.z > 0.0,
    }
}

/// Continuous target location of pixel `p` with disparity `d`.
#[inline]
pub fn rigid_warp(p: Point2<f64>, d: f64, rig: &StereoRig, pose: &Pose) -> Point2<f64> {
    warp(p, d, rig, pose).point
}

/// Rigid flow `w(p) - p` for every pixel.
pub fn rigid_flow(disparity: &ScalarMap, rig: &StereoRig, pose: &Pose) -> VectorMap {
    Grid::par_from_fn(disparity.width(), disparity.height(), |x, y| {
        let p = Point2::new(x as f64, y as f64);
        let q = rigid_warp(p, disparity.get(x, y), rig, pose);
        Vector2::new(q.x - p.x, q.y - p.y)
    })
}

/// Z-buffered visibility of each source pixel in the target view.
///
/// A pixel is hidden when it leaves the image, falls behind the camera, or
/// another pixel lands on the same rounded target pixel with a target-frame
/// disparity larger by more than [`ZBUFFER_TOLERANCE`].
pub fn visibility_map(disparity: &ScalarMap, rig: &StereoRig, pose: &Pose) -> MaskMap {
    let (w, h) = disparity.dims();
    let warped: Vec<Option<(usize, f64)>> = (0..w * h)
        .map(|i| {
            let p = Point2::new((i % w) as f64, (i / w) as f64);
            let r = warp(p, disparity.data()[i], rig, pose);
            if !r.in_front {
                return None;
            }
            let tx = r.point.x.round();
            let ty = r.point.y.round();
            if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                return None;
            }
            Some((ty as usize * w + tx as usize, r.disparity))
        })
        .collect();
    let mut zbuf = vec![f64::NEG_INFINITY; w * h];
    for &(t, d) in warped.iter().flatten() {
        if d > zbuf[t] {
            zbuf[t] = d;
        }
    }
    Grid::from_vec(
        w,
        h,
        warped
            .iter()
            .map(|r| match r {
                Some((t, d)) => zbuf[*t] - d <= ZBUFFER_TOLERANCE,
                None => false,
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rig() -> StereoRig {
        StereoRig::new(Intrinsics::new(100.0, 0.0, 0.0), 0.5, 64, 48)
    }

    #[test]
    fn identity_pose_fixes_pixels() {
        let q = rigid_warp(Point2::new(10.0, 20.0), 7.0, &rig(), &Pose::identity());
        assert_eq!(q, Point2::new(10.0, 20.0));
    }

    #[test]
    fn left_to_right_is_disparity_shift() {
        let r = rig();
        let q = rigid_warp(Point2::new(10.0, 20.0), 5.0, &r, &r.left_to_right());
        assert_relative_eq!(q.x, 5.0, epsilon = 1e-12);
        assert_relative_eq!(q.y, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn forward_translation_matches_matrix_oracle() {
        // Oracle: K * [R|t] * [K^-1 p; d/(fB)] with explicit 3x4 arithmetic.
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -1.0));
        let k = Matrix3::new(100.0, 0.0, 0.0, 0.0, 100.0, 0.0, 0.0, 0.0, 1.0);
        let kinv = k.try_inverse().unwrap();
        let ray = kinv * Vector3::new(10.0, 20.0, 1.0);
        let hom = nalgebra::Vector4::new(ray.x, ray.y, ray.z, 5.0 / (100.0 * 0.5));
        let p34 = pose.to_matrix4().fixed_view::<3, 4>(0, 0).into_owned();
        let x = k * (p34 * hom);
        let q = rigid_warp(Point2::new(10.0, 20.0), 5.0, &rig(), &pose);
        assert_relative_eq!(q.x, x.x / x.z, epsilon = 1e-12);
        assert_relative_eq!(q.y, x.y / x.z, epsilon = 1e-12);
        assert_relative_eq!(q.x, 100.0 / 9.0, epsilon = 1e-12);
        assert_relative_eq!(q.y, 200.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_disparity_is_pure_rotation() {
        let r = rig();
        let pose = Pose::new(
            Pose::from_axis_angle(Vector3::new(0.1, 1.0, 0.0), 0.05).r,
            Vector3::new(3.0, -1.0, 2.0),
        );
        let rot_only = Pose::new(pose.r, Vector3::zeros());
        let a = rigid_warp(Point2::new(12.0, 7.0), 0.0, &r, &pose);
        let b = rigid_warp(Point2::new(12.0, 7.0), 0.0, &r, &rot_only);
        assert_relative_eq!(a.x, b.x, epsilon = 1e-12);
        assert_relative_eq!(a.y, b.y, epsilon = 1e-12);
    }

    #[test]
    fn compose_and_invert() {
        let id = Pose::identity().compose(&Pose::identity());
        assert_eq!(id, Pose::identity());
        let inv = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)).inverse();
        assert_relative_eq!(inv.t, Vector3::new(-1.0, -2.0, -3.0));
        // 4x4 oracle for rotation-after-translation applied to the origin.
        let rz = Pose::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let tx = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let m = rz.to_matrix4() * tx.to_matrix4();
        let expect = m * nalgebra::Vector4::new(0.0, 0.0, 0.0, 1.0);
        let got = rz.compose(&tx).transform(&Vector3::zeros());
        assert_relative_eq!(got, expect.xyz(), epsilon = 1e-12);
        assert_relative_eq!(got, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let a = Pose::new(
            Pose::from_axis_angle(Vector3::new(0.3, -0.2, 0.9), 0.7).r,
            Vector3::new(0.4, 5.0, -2.0),
        );
        let e = a.compose(&a.inverse());
        assert!((e.r - Matrix3::identity()).abs().max() < 1e-9);
        assert!(e.t.abs().max() < 1e-9);
    }

    #[test]
    fn exp_of_small_twist_matches_first_order() {
        let tw = Vector6::new(1e-3, -2e-3, 5e-4, 1e-4, -3e-4, 2e-4);
        let p = Pose::exp(&tw);
        assert!(p.orthonormality_error() < 1e-12);
        assert_relative_eq!(p.t, Vector3::new(1e-3, -2e-3, 5e-4), epsilon = 1e-6);
    }

    #[test]
    fn rigid_flow_identity_and_stereo() {
        let r = rig();
        let d = Grid::from_fn(8, 6, |x, y| 1.0 + (x + y) as f64 * 0.5);
        let f = rigid_flow(&d, &r, &Pose::identity());
        assert!(f.iter().all(|v| v.norm() < 1e-12));
        let f = rigid_flow(&d, &r, &r.left_to_right());
        for y in 0..6 {
            for x in 0..8 {
                assert_relative_eq!(f.get(x, y).x, -d.get(x, y), epsilon = 1e-12);
                assert_relative_eq!(f.get(x, y).y, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn forward_motion_flow_expands_radially() {
        let r = StereoRig::new(Intrinsics::new(50.0, 8.0, 6.0), 0.5, 17, 13);
        let d = Grid::new(17, 13, 5.0);
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, -0.5));
        let f = rigid_flow(&d, &r, &pose);
        // Per-pixel oracle: depth z = fB/d = 5, new depth 4.5, scale 5/4.5.
        for y in 0..13 {
            for x in 0..17 {
                let s = 5.0 / 4.5;
                let ex = (x as f64 - 8.0) * (s - 1.0);
                let ey = (y as f64 - 6.0) * (s - 1.0);
                assert_relative_eq!(f.get(x, y).x, ex, epsilon = 1e-12);
                assert_relative_eq!(f.get(x, y).y, ey, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn visibility_constant_disparity_identity() {
        let d = Grid::new(8, 8, 4.0);
        let v = visibility_map(&d, &rig(), &Pose::identity());
        assert_eq!(v.count(), 64);
    }

    #[test]
    fn visibility_out_of_view() {
        let r = rig();
        let d = Grid::new(8, 8, 3.0);
        let v = visibility_map(&d, &r, &r.left_to_right());
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(v.get(x, y), x >= 3);
            }
        }
    }

    #[test]
    fn visibility_two_layer_matches_exhaustive_oracle() {
        // Near band (d = 8) at columns 8..12 lands on far pixels (d = 2).
        let r = StereoRig::new(Intrinsics::new(100.0, 0.0, 0.0), 0.5, 16, 16);
        let d = Grid::from_fn(16, 16, |x, _| if (8..12).contains(&x) { 8.0 } else { 2.0 });
        let pose = r.left_to_right();
        let v = visibility_map(&d, &r, &pose);
        // Oracle: compare every pair of source pixels directly.
        for y in 0..16 {
            for x in 0..16 {
                let a = warp(Point2::new(x as f64, y as f64), d.get(x, y), &r, &pose);
                let ta = (a.point.x.round(), a.point.y.round());
                let inside = ta.0 >= 0.0 && ta.0 < 16.0 && ta.1 >= 0.0 && ta.1 < 16.0;
                let mut occluded = false;
                for yy in 0..16 {
                    for xx in 0..16 {
                        let b = warp(Point2::new(xx as f64, yy as f64), d.get(xx, yy), &r, &pose);
                        if (b.point.x.round(), b.point.y.round()) == ta
                            && b.disparity - a.disparity > ZBUFFER_TOLERANCE
                        {
                            occluded = true;
                        }
                    }
                }
                assert_eq!(v.get(x, y), inside && !occluded, "pixel ({x},{y})");
            }
        }
        // Far columns 2..6 land on the band's targets 0..4.
        assert!(!v.get(2, 3) && !v.get(5, 3));
        assert!(v.get(6, 3) && v.get(9, 3) && v.get(13, 3));
        assert!(!v.get(0, 3));
    }
}
