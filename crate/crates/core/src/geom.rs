//! Quaternion and pose algebra plus the pinhole projection used by the
//! reprojection loss.
//!
//! Quaternions are stored scalar-first, `(w, x, y, z)`. A pose holds the
//! vector `x` and unit quaternion `q` of the projection
//! `(u', v', w') = K (R(q) g + x)`, so `x` is expressed in the camera frame.
//! The camera centre in world coordinates is `-R(q)^T x`.

use std::fmt;
use std::ops::Neg;

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector3, Vector4};

pub use nalgebra::{Point2, Point3};

use crate::error::{Error, Result};

/// Tolerance on `| |q| - 1 |` for a quaternion to count as unit.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Smallest admissible `|w'|` in [`project`].
pub const MIN_PROJECTION_DEPTH: f64 = 1e-12;

/// 2x7 Jacobian of image coordinates with respect to `(x, q)`.
pub type ProjectionJacobian = SMatrix<f64, 2, 7>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Components in `(w, x, y, z)` order.
    pub fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Scales to unit length.
    pub fn normalize(&self) -> Result<Quaternion> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain(format!(
                "cannot normalise quaternion with norm {n}"
            )));
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Whether `q` lies on the canonical hemisphere: `w > 0`, or `w = 0` and
    /// the first nonzero vector component is positive.
    pub fn is_canonical(&self) -> bool {
        if self.w != 0.0 {
            return self.w > 0.0;
        }
        [self.x, self.y, self.z]
            .into_iter()
            .find(|c| *c != 0.0)
            .is_some_and(|c| c > 0.0)
    }

    /// Returns `q` or `-q`, whichever is on the canonical hemisphere.
    pub fn canonicalize(&self) -> Result<Quaternion> {
        if self.w == 0.0 && self.x == 0.0 && self.y == 0.0 && self.z == 0.0 {
            return Err(Error::Domain("cannot canonicalise the zero quaternion".into()));
        }
        Ok(if self.is_canonical() { *self } else { -*self })
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_rotation_matrix(&self) -> Result<Matrix3<f64>> {
        if !self.is_unit() {
            return Err(Error::Domain(format!(
                "rotation matrix requires a unit quaternion, norm is {}",
                self.norm()
            )));
        }
        Ok(rotation_matrix_unchecked(self))
    }

    /// Unit quaternion of a proper rotation matrix (Shepperd's method). The
    /// sign of the result is arbitrary; canonicalise if needed.
    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Result<Quaternion> {
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalize()
    }

    /// Hamilton product `self * other`.
    pub fn mul(&self, other: &Quaternion) -> Quaternion {
        let (a, b) = (self, other);
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Rotation by `angle` radians about `axis` (need not be unit).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Quaternion> {
        let n = axis.norm();
        if !(n > 0.0) {
            return Err(Error::Domain("rotation axis has zero length".into()));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Ok(Quaternion::new(c, s * a.x, s * a.y, s * a.z))
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;

    fn neg(self) -> Quaternion {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }
}

impl fmt::Display for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

/// The polynomial rotation-matrix formula evaluated without checking the norm.
pub(crate) fn rotation_matrix_unchecked(q: &Quaternion) -> Matrix3<f64> {
    let Quaternion { w, x, y, z } = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`rotation_matrix_unchecked`] with respect to
/// `w`, `x`, `y`, `z`.
pub(crate) fn rotation_matrix_partials(q: &Quaternion) -> [Matrix3<f64>; 4] {
    let Quaternion { w, x, y, z } = *q;
    let d_w = Matrix3::new(
        0.0, -2.0 * z, 2.0 * y, //
        2.0 * z, 0.0, -2.0 * x, //
        -2.0 * y, 2.0 * x, 0.0,
    );
    let d_x = Matrix3::new(
        0.0, 2.0 * y, 2.0 * z, //
        2.0 * y, -4.0 * x, -2.0 * w, //
        2.0 * z, 2.0 * w, -4.0 * x,
    );
    let d_y = Matrix3::new(
        -4.0 * y, 2.0 * x, 2.0 * w, //
        2.0 * x, 0.0, 2.0 * z, //
        -2.0 * w, 2.0 * z, -4.0 * y,
    );
    let d_z = Matrix3::new(
        -4.0 * z, -2.0 * w, 2.0 * x, //
        2.0 * w, -4.0 * z, 2.0 * y, //
        2.0 * x, 2.0 * y, 0.0,
    );
    [d_w, d_x, d_y, d_z]
}

/// Camera pose: the translation `x` of the projection model and a unit
/// orientation quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Quaternion,
}

impl Pose {
    /// Builds a pose, normalising the orientation.
    pub fn new(position: Vector3<f64>, orientation: Quaternion) -> Result<Self> {
        if !position.iter().all(|c| c.is_finite()) || !orientation.is_finite() {
            return Err(Error::Domain("pose components must be finite".into()));
        }
        Ok(Self {
            position,
            orientation: orientation.normalize()?,
        })
    }

    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: Quaternion::identity(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix_unchecked(&self.orientation)
    }

    /// Camera centre in world coordinates, `-R^T x`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.position)
    }

    /// Pose with the given world-to-camera rotation and camera centre.
    pub fn from_center(rotation: &Matrix3<f64>, center: &Vector3<f64>) -> Result<Self> {
        let q = Quaternion::from_rotation_matrix(rotation)?.canonicalize()?;
        let r = rotation_matrix_unchecked(&q);
        Pose::new(-(r * center), q)
    }

    /// The same camera after the world origin moves to `origin`, i.e. every
    /// world point `g` becomes `g - origin`. Projections are unchanged.
    pub fn with_world_origin(&self, origin: &Vector3<f64>) -> Pose {
        Pose {
            position: self.position + self.rotation() * origin,
            orientation: self.orientation,
        }
    }
}

/// Upper-triangular intrinsic calibration matrix with `K[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    matrix: Matrix3<f64>,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraIntrinsics {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self> {
        Self::from_matrix(Matrix3::new(fx, skew, cx, 0.0, fy, cy, 0.0, 0.0, 1.0))
    }

    pub fn from_matrix(matrix: Matrix3<f64>) -> Result<Self> {
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("intrinsics must be finite".into()));
        }
        if matrix[(1, 0)] != 0.0 || matrix[(2, 0)] != 0.0 || matrix[(2, 1)] != 0.0 {
            return Err(Error::Domain("intrinsics must be upper triangular".into()));
        }
        if matrix[(2, 2)] != 1.0 {
            return Err(Error::Domain("intrinsics must have K[2][2] = 1".into()));
        }
        if !(matrix[(0, 0)] > 0.0 && matrix[(1, 1)] > 0.0) {
            return Err(Error::Domain("intrinsics diagonal must be positive".into()));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }
}

/// Projects `g` under `pose`, returning image coordinates and the depth `w'`.
pub fn project(pose: &Pose, k: &CameraIntrinsics, g: &Point3<f64>) -> Result<(Point2<f64>, f64)> {
    project_raw(&pose.position, &pose.orientation, k, g)
}

/// [`project`] for an arbitrary (not necessarily unit) quaternion; the
/// rotation-matrix polynomial is applied as is.
pub(crate) fn project_raw(
    position: &Vector3<f64>,
    q: &Quaternion,
    k: &CameraIntrinsics,
    g: &Point3<f64>,
) -> Result<(Point2<f64>, f64)> {
    let p = k.matrix * (rotation_matrix_unchecked(q) * g.coords + position);
    if p.z.abs() < MIN_PROJECTION_DEPTH {
        return Err(Error::PointAtCameraPlane { depth: p.z });
    }
    Ok((Point2::new(p.x / p.z, p.y / p.z), p.z))
}

/// Jacobian of the image coordinates of [`project`] with respect to
/// `(x_1, x_2, x_3, q_w, q_x, q_y, q_z)`.
pub fn project_grad(pose: &Pose, k: &CameraIntrinsics, g: &Point3<f64>) -> Result<ProjectionJacobian> {
    project_grad_raw(&pose.position, &pose.orientation, k, g).map(|(_, _, j)| j)
}

/// Projection and its Jacobian in one pass: `(uv, depth, jacobian)`.
pub(crate) fn project_grad_raw(
    position: &Vector3<f64>,
    q: &Quaternion,
    k: &CameraIntrinsics,
    g: &Point3<f64>,
) -> Result<(Point2<f64>, f64, ProjectionJacobian)> {
    let km = &k.matrix;
    let p = km * (rotation_matrix_unchecked(q) * g.coords + position);
    let depth = p.z;
    if depth.abs() < MIN_PROJECTION_DEPTH {
        return Err(Error::PointAtCameraPlane { depth });
    }
    let inv = 1.0 / depth;
    let d_uv = Matrix2x3::new(
        inv,
        0.0,
        -p.x * inv * inv,
        0.0,
        inv,
        -p.y * inv * inv,
    );
    let mut jac = ProjectionJacobian::zeros();
    let d_pos = d_uv * km;
    jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_pos);
    for (i, d_r) in rotation_matrix_partials(q).iter().enumerate() {
        let col = d_pos * (d_r * g.coords);
        jac.fixed_view_mut::<2, 1>(0, 3 + i).copy_from(&col);
    }
    Ok((Point2::new(p.x * inv, p.y * inv), depth, jac))
}

/// Geodesic angle between two unit quaternions in degrees, `[0, 180]`.
pub fn angular_error_deg(q: &Quaternion, q_hat: &Quaternion) -> f64 {
    let c = q.dot(q_hat).abs().min(1.0);
    (2.0 * c.acos()).to_degrees()
}
