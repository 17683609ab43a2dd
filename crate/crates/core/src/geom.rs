//! Rigid transforms, pinhole cameras, depth maps and rigid point-set alignment.
//!
//! Conventions: right-handed camera frame with +z forward, +x right and +y
//! down. Pixel `(col, row)` covers `[col, col + 1) x [row, row + 1)` and its
//! center sits at `(col + 0.5, row + 0.5)`. A [`Pose`] maps model-frame points
//! into the camera frame, `x_cam = R * x + t`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector4, Vector6, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Smallest camera-frame depth accepted by projection.
pub const MIN_DEPTH: f64 = 1e-9;

/// Rigid transform from the model frame to the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Mat3::identity(), translation)
    }

    /// Rotation given as an axis-angle vector (radians).
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self::new(so3_exp(&axis_angle), translation)
    }

    pub fn transform(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Left-multiplied tangent update `(Exp(ω) R, t + δt)` with `delta = (ω, δt)`.
    pub fn perturb(&self, delta: &Vector6<f64>) -> Self {
        let omega = Vec3::new(delta[0], delta[1], delta[2]);
        let dt = Vec3::new(delta[3], delta[4], delta[5]);
        Self::new(so3_exp(&omega) * self.rotation, self.translation + dt)
    }

    /// Inverse of [`Pose::perturb`]: the tangent vector taking `self` to `other`.
    pub fn tangent_to(&self, other: &Pose) -> Vector6<f64> {
        let omega = so3_log(&(other.rotation * self.rotation.transpose()));
        let dt = other.translation - self.translation;
        Vector6::new(omega[0], omega[1], omega[2], dt[0], dt[1], dt[2])
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_error(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Orthonormal with determinant +1 within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Mat3::identity()).amax();
        ortho <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Re-orthonormalizes the rotation (nearest rotation in Frobenius norm).
    pub fn orthonormalized(&self) -> Self {
        Self::new(nearest_rotation(&self.rotation), self.translation)
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn to_row_major(&self) -> ([f64; 9], [f64; 3]) {
        let r = &self.rotation;
        (
            [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            [self.translation[0], self.translation[1], self.translation[2]],
        )
    }

    /// Builds a pose from a 4x4 row-major homogeneous matrix.
    pub fn from_matrix4_row_major(m: &[f64; 16]) -> Self {
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    #[serde(rename = "R")]
    rotation: [[f64; 3]; 3],
    t: [f64; 3],
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            t: [self.translation[0], self.translation[1], self.translation[2]],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(deserializer)?;
        let r = repr.rotation;
        Ok(Pose::new(
            Mat3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vec3::from(repr.t),
        ))
    }
}

/// Pinhole camera intrinsics (pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive (fx = {fx}, fy = {fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point. `None` when it is not in front of the camera.
    #[inline]
    pub fn project(&self, p: &Vec3) -> Option<Vec2> {
        if p.z > MIN_DEPTH {
            Some(Vec2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
        } else {
            None
        }
    }

    /// Camera-frame point at depth `z` along the ray through pixel `(u, v)`.
    #[inline]
    pub fn unproject(&self, pixel: &Vec2, z: f64) -> Vec3 {
        Vec3::new((pixel.x - self.cx) / self.fx * z, (pixel.y - self.cy) / self.fy * z, z)
    }
}

/// Row-major per-pixel depth in meters, `0` meaning no surface.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

/// Relative tolerance of the planarity test in [`DepthMap::sample`].
pub const PLANARITY_TOL: f64 = 1e-9;

impl DepthMap {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::ShapeMismatch(format!(
                "{} depth values for a {width}x{height} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("depth values must be finite and >= 0".into()));
        }
        Ok(Self { width, height, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, col: u32, row: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    #[inline]
    pub fn get(&self, col: u32, row: u32) -> f64 {
        self.values[self.index(col, row)]
    }

    pub fn set(&mut self, col: u32, row: u32, value: f64) {
        let i = self.index(col, row);
        self.values[i] = value;
    }

    /// Center of pixel `index` in continuous pixel coordinates.
    #[inline]
    pub fn pixel_center(&self, index: usize) -> Vec2 {
        let w = self.width as usize;
        Vec2::new((index % w) as f64 + 0.5, (index / w) as f64 + 0.5)
    }

    /// The pixel containing the continuous coordinate, if inside the image.
    #[inline]
    pub fn containing_pixel(&self, pixel: &Vec2) -> Option<(u32, u32)> {
        if pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64 {
            Some((pixel.x as u32, pixel.y as u32))
        } else {
            None
        }
    }

    /// Depth of the pixel containing `pixel`; `0` when outside the image.
    pub fn at(&self, pixel: &Vec2) -> f64 {
        self.containing_pixel(pixel).map(|(c, r)| self.get(c, r)).unwrap_or(0.0)
    }

    pub fn mask(&self) -> Vec<bool> {
        self.values.iter().map(|&d| d > 0.0).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }

    /// Depth at a continuous location, interpolated between the four
    /// surrounding pixel centers.
    ///
    /// Inverse depth is affine in image coordinates over a planar patch, so
    /// bilinear interpolation of `1/z` is exact when all four samples lie on
    /// one plane. The four samples must be valid and pass the planarity test
    /// `1/z00 + 1/z11 = 1/z10 + 1/z01` (relative tolerance `rel_tol`);
    /// otherwise the location straddles a crease, an occlusion boundary or
    /// the silhouette and `None` is returned.
    pub fn sample_with_tol(&self, pixel: &Vec2, rel_tol: f64) -> Option<f64> {
        let x = pixel.x - 0.5;
        let y = pixel.y - 0.5;
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let c0 = x.floor();
        let r0 = y.floor();
        let (c0u, r0u) = (c0 as u32, r0 as u32);
        if c0u + 1 >= self.width || r0u + 1 >= self.height {
            return None;
        }
        let z00 = self.get(c0u, r0u);
        let z10 = self.get(c0u + 1, r0u);
        let z01 = self.get(c0u, r0u + 1);
        let z11 = self.get(c0u + 1, r0u + 1);
        if !(z00 > 0.0 && z10 > 0.0 && z01 > 0.0 && z11 > 0.0) {
            return None;
        }
        let (i00, i10, i01, i11) = (1.0 / z00, 1.0 / z10, 1.0 / z01, 1.0 / z11);
        let scale = i00.max(i10).max(i01).max(i11);
        if ((i00 + i11) - (i10 + i01)).abs() > rel_tol * scale {
            return None;
        }
        let sx = x - c0;
        let sy = y - r0;
        let inv = (1.0 - sy) * ((1.0 - sx) * i00 + sx * i10) + sy * ((1.0 - sx) * i01 + sx * i11);
        Some(1.0 / inv)
    }

    pub fn sample(&self, pixel: &Vec2) -> Option<f64> {
        self.sample_with_tol(pixel, PLANARITY_TOL)
    }
}

/// Points with optional nonnegative weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vec3>,
    pub weights: Option<Vec<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, weights: None }
    }

    pub fn with_weights(points: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != points.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} points",
                weights.len(),
                points.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("weights must be nonnegative".into()));
        }
        Ok(Self {
            points,
            weights: Some(weights),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Projects model-frame points through `pose` and `k`.
pub fn project(pose: &Pose, k: &Intrinsics, points: &[Vec3]) -> Result<Vec<Vec2>> {
    points
        .iter()
        .enumerate()
        .map(|(index, x)| {
            let p = pose.transform(x);
            k.project(&p).ok_or(Error::BehindCamera { index, z: p.z })
        })
        .collect()
}

/// Model-frame point seen at `pixel`, using the depth of the containing pixel:
/// `x = R^-1 (K^-1 D(u, v) (u, v, 1)^T - t)`.
pub fn backproject(pose: &Pose, k: &Intrinsics, depth: &DepthMap, pixel: &Vec2) -> Result<Vec3> {
    let (c, r) = depth.containing_pixel(pixel).ok_or(Error::OutOfBounds {
        u: pixel.x,
        v: pixel.y,
        width: depth.width,
        height: depth.height,
    })?;
    let z = depth.get(c, r);
    if z <= 0.0 {
        return Err(Error::ZeroDepth { u: pixel.x, v: pixel.y });
    }
    Ok(backproject_at_depth(pose, k, pixel, z))
}

#[inline]
pub fn backproject_at_depth(pose: &Pose, k: &Intrinsics, pixel: &Vec2, z: f64) -> Vec3 {
    pose.rotation.transpose() * (k.unproject(pixel, z) - pose.translation)
}

/// Weighted least-squares rigid transform taking `src` onto `dst`, minimizing
/// `sum_i w_i |dst_i - (R src_i + t)|^2` with `det(R) = +1`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3], weights: Option<&[f64]>) -> Result<Pose> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source points vs {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != src.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} points",
                w.len(),
                src.len()
            )));
        }
        if w.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidParameter("kabsch weights must be nonnegative".into()));
        }
    }
    if src.len() < 3 {
        return Err(Error::TooFewCorrespondences {
            needed: 3,
            got: src.len(),
        });
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);

    let mut total = 0.0;
    let mut src_c = Vec3::zeros();
    let mut dst_c = Vec3::zeros();
    for i in 0..src.len() {
        let w = weight(i);
        total += w;
        src_c += w * src[i];
        dst_c += w * dst[i];
    }
    if !(total > 0.0) {
        return Err(Error::Degenerate("all kabsch weights are zero".into()));
    }
    src_c /= total;
    dst_c /= total;

    let mut cov = Mat3::zeros();
    for i in 0..src.len() {
        let w = weight(i);
        cov += w * (dst[i] - dst_c) * (src[i] - src_c).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let s = svd.singular_values;
    let (s_max, s_mid) = sorted_top_two(&s);
    if !(s_max > 0.0) || s_mid <= 1e-12 * s_max {
        return Err(Error::Degenerate(
            "point covariance has rank < 2 (collinear or coincident points)".into(),
        ));
    }
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    let rotation = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
    let translation = dst_c - rotation * src_c;
    Ok(Pose::new(rotation, translation))
}

fn sorted_top_two(s: &Vec3) -> (f64, f64) {
    let mut v = [s[0], s[1], s[2]];
    v.sort_by(|a, b| b.total_cmp(a));
    (v[0], v[1])
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(omega: &Vec3) -> Mat3 {
    Rotation3::new(*omega).into_inner()
}

/// Axis-angle vector of `r`; accurate for small angles, where the trace-based
/// angle loses precision.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let v = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let angle = rotation_angle(r);
    if angle < 1e-4 {
        // sin(a) / a to third order
        v / (1.0 - angle * angle / 6.0)
    } else if angle < std::f64::consts::PI - 1e-4 {
        v * (angle / angle.sin())
    } else {
        Rotation3::from_matrix_unchecked(*r).scaled_axis()
    }
}

/// Rotation angle of `r`, accurate near zero and near pi.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let s = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    s.atan2(c)
}

/// Closest rotation matrix to `m` in the Frobenius sense.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t
}

/// Rotation from intrinsic x-y-z Euler angles (radians): `Rx(a) Ry(b) Rz(c)`.
pub fn euler_xyz(a: f64, b: f64, c: f64) -> Mat3 {
    so3_exp(&Vec3::new(a, 0.0, 0.0)) * so3_exp(&Vec3::new(0.0, b, 0.0)) * so3_exp(&Vec3::new(0.0, 0.0, c))
}

/// Uniformly distributed rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let q = Vector4::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = q.norm();
        if n > 1e-6 {
            let q = nalgebra::Quaternion::new(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
            return UnitQuaternion::new_unchecked(q).to_rotation_matrix().into_inner();
        }
    }
}
