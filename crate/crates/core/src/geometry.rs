//! Quaternion and rigid-body pose algebra plus the pinhole camera model.
//!
//! Conventions used throughout the crate:
//!
//! * Quaternions are stored as `(w, x, y, z)` and multiply with the Hamilton
//!   convention.
//! * Camera frame: `+z` forward, `+x` right, `+y` down. Pixel `(0, 0)` is the
//!   center of the top-left pixel.
//! * A [`Pose`] maps camera coordinates to world coordinates.
//! * A [`RelativePose`] produced by [`relative_pose_target`] stores the
//!   world-frame translation difference `x_t - x_{t-1}` and the rotation
//!   `q_{t-1}^{-1} q_t`. Warping needs the translation expressed in the
//!   previous camera frame instead; see [`RelativePose::in_previous_camera`].

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let (s, c) = (angle / 2.0).sin_cos();
        Quaternion::new(c, axis[0] * s, axis[1] * s, axis[2] * s)
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, other: Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn conjugate(self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn neg(self) -> Self {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Rotates a vector by this (unit) quaternion.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        mat_vec(&quat_to_rotation_matrix(self), v)
    }

    /// Extracts the quaternion of an orthonormal rotation matrix (Shepperd's
    /// method). The result is normalized and canonicalized.
    pub fn from_rotation_matrix(r: &Mat3) -> Self {
        let trace = r[0][0] + r[1][1] + r[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (r[2][1] - r[1][2]) / s,
                (r[0][2] - r[2][0]) / s,
                (r[1][0] - r[0][1]) / s,
            )
        } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
            let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (r[2][1] - r[1][2]) / s,
                0.25 * s,
                (r[0][1] + r[1][0]) / s,
                (r[0][2] + r[2][0]) / s,
            )
        } else if r[1][1] > r[2][2] {
            let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (r[0][2] - r[2][0]) / s,
                (r[0][1] + r[1][0]) / s,
                0.25 * s,
                (r[1][2] + r[2][1]) / s,
            )
        } else {
            let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (r[1][0] - r[0][1]) / s,
                (r[0][2] + r[2][0]) / s,
                (r[1][2] + r[2][1]) / s,
                0.25 * s,
            )
        };
        // Non-zero by construction: the pivot term is at least 0.5.
        quat_canonicalize(quat_normalize(q).expect("rotation matrix quaternion"))
    }
}

pub fn quat_normalize(q: Quaternion) -> Result<Quaternion> {
    let n = q.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    Ok(Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n))
}

/// Hamilton product `a * b`.
pub fn quat_multiply(a: Quaternion, b: Quaternion) -> Quaternion {
    Quaternion::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

/// Inverse of a unit quaternion, i.e. its conjugate.
pub fn quat_inverse(q: Quaternion) -> Quaternion {
    q.conjugate()
}

pub fn quat_to_rotation_matrix(q: Quaternion) -> Mat3 {
    let Quaternion { w, x, y, z } = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Picks the `w >= 0` representative of the `q` / `-q` pair.
pub fn quat_canonicalize(q: Quaternion) -> Quaternion {
    if q.w < 0.0 {
        q.neg()
    } else {
        q
    }
}

/// Geodesic angle between two rotations, in degrees.
pub fn angular_error_deg(a: Quaternion, b: Quaternion) -> f64 {
    // atan2 of the relative rotation stays accurate near zero, unlike acos.
    let r = quat_multiply(a.conjugate(), b);
    let v = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
    2.0 * v.atan2(r.w.abs()).to_degrees()
}

/// Global camera-to-world pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub translation: Vec3,
    pub rotation: Quaternion,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        translation: [0.0; 3],
        rotation: Quaternion::IDENTITY,
    };

    pub fn new(translation: Vec3, rotation: Quaternion) -> Self {
        Pose {
            translation,
            rotation,
        }
    }

    pub fn to_transform(&self) -> HomogeneousTransform {
        pose_to_transform(self.translation, self.rotation)
    }

    pub fn from_transform(t: &HomogeneousTransform) -> Self {
        Pose {
            translation: t.translation(),
            rotation: Quaternion::from_rotation_matrix(&t.rotation()),
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = quat_inverse(self.rotation);
        let t = inv.rotate(self.translation);
        Pose::new([-t[0], -t[1], -t[2]], inv)
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        add3(self.rotation.rotate(p), self.translation)
    }
}

/// Motion between two consecutive frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    pub translation: Vec3,
    pub rotation: Quaternion,
}

impl RelativePose {
    pub const IDENTITY: RelativePose = RelativePose {
        translation: [0.0; 3],
        rotation: Quaternion::IDENTITY,
    };

    pub fn new(translation: Vec3, rotation: Quaternion) -> Self {
        RelativePose {
            translation,
            rotation,
        }
    }

    pub fn to_transform(&self) -> HomogeneousTransform {
        pose_to_transform(self.translation, self.rotation)
    }

    /// Re-expresses a world-frame relative pose (as returned by
    /// [`relative_pose_target`]) in the previous camera frame, so that its
    /// transform maps current-camera points into the previous camera.
    pub fn in_previous_camera(&self, prev_rotation: Quaternion) -> RelativePose {
        RelativePose {
            translation: quat_inverse(prev_rotation).rotate(self.translation),
            rotation: self.rotation,
        }
    }

    /// Applies this world-frame relative pose to `prev`, recovering the
    /// current pose.
    pub fn apply_to(&self, prev: &Pose) -> Pose {
        Pose {
            translation: add3(prev.translation, self.translation),
            rotation: quat_multiply(prev.rotation, self.rotation),
        }
    }
}

pub fn relative_pose_target(prev: &Pose, curr: &Pose) -> RelativePose {
    RelativePose {
        translation: sub3(curr.translation, prev.translation),
        rotation: quat_canonicalize(quat_multiply(quat_inverse(prev.rotation), curr.rotation)),
    }
}

/// 4x4 rigid transform `[[R, t], [0, 1]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomogeneousTransform(pub [[f64; 4]; 4]);

impl HomogeneousTransform {
    pub const IDENTITY: HomogeneousTransform = HomogeneousTransform([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]);

    /// Validates the rigid-transform invariants: an orthonormal rotation
    /// block (to `orth_tol`) and a last row of `(0, 0, 0, 1)` (to `row_tol`).
    pub fn validated(m: [[f64; 4]; 4], orth_tol: f64, row_tol: f64) -> Result<Self> {
        let last = [0.0, 0.0, 0.0, 1.0];
        for (j, want) in last.iter().enumerate() {
            if (m[3][j] - want).abs() > row_tol || !m[3][j].is_finite() {
                return Err(Error::InvalidTransform(format!(
                    "last row must be (0, 0, 0, 1), got {:?}",
                    m[3]
                )));
            }
        }
        let t = HomogeneousTransform(m);
        let err = orthonormality_error(&t.rotation());
        if !(err <= orth_tol) {
            return Err(Error::InvalidTransform(format!(
                "rotation block not orthonormal (max |R^T R - I| = {err:.3e})"
            )));
        }
        Ok(t)
    }

    pub fn rotation(&self) -> Mat3 {
        let m = &self.0;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3 {
        [self.0[0][3], self.0[1][3], self.0[2][3]]
    }

    pub fn compose(&self, other: &HomogeneousTransform) -> HomogeneousTransform {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        HomogeneousTransform(out)
    }

    pub fn inverse(&self) -> HomogeneousTransform {
        let r = self.rotation();
        let t = self.translation();
        let mut out = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = r[j][i];
            }
            out[i][3] = -(0..3).map(|k| r[k][i] * t[k]).sum::<f64>();
        }
        out[3][3] = 1.0;
        HomogeneousTransform(out)
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }
}

pub fn pose_to_transform(translation: Vec3, rotation: Quaternion) -> HomogeneousTransform {
    let r = quat_to_rotation_matrix(rotation);
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&r[i]);
        m[i][3] = translation[i];
    }
    m[3][3] = 1.0;
    HomogeneousTransform(m)
}

/// Max-abs entry of `R^T R - I`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            err = err.max((dot - want).abs());
        }
    }
    err
}

/// Pinhole camera intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {fx}, fy = {fy})"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square image of `size` pixels with focal length equal to the image
    /// width (about 53 degrees of horizontal field of view).
    pub fn square(size: usize) -> Self {
        let s = size as f64;
        CameraIntrinsics::new(s, s, s / 2.0, s / 2.0, size, size).expect("valid square intrinsics")
    }
}

pub fn project(pt: Vec3, k: &CameraIntrinsics) -> Result<[f64; 2]> {
    if !(pt[2] > 0.0) {
        return Err(Error::BehindCamera { z: pt[2] });
    }
    Ok([k.fx * pt[0] / pt[2] + k.cx, k.fy * pt[1] / pt[2] + k.cy])
}

pub fn unproject(px: [f64; 2], depth: f64, k: &CameraIntrinsics) -> Result<Vec3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth { depth });
    }
    Ok([
        (px[0] - k.cx) * depth / k.fx,
        (px[1] - k.cy) * depth / k.fy,
        depth,
    ])
}

pub(crate) fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}
