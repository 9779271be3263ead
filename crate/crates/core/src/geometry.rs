//! Rigid transforms, the pinhole camera, plane parameterizations and the
//! rotation algebra shared by the tracker and the Manhattan estimator.
//!
//! Conventions used throughout the crate:
//!
//! - [`Pose`] is `T_cw`: it maps world coordinates into the camera frame,
//!   `X_c = R X_w + t`.
//! - Planes are `n·X + d = 0` with a unit normal. The canonical
//!   representative has `d <= 0` (see [`PlaneHessian::canonical`]).
//! - Rotation increments are applied on the left: `R <- Exp(w) R`.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3, Vector4};
use thiserror::Error;

/// Points closer to the image plane than this are treated as degenerate.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("invalid raw depth value {0}")]
    InvalidDepth(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("matrix is not a proper rotation")]
    NotARotation,
    #[error("plane normal has zero length")]
    ZeroNormal,
}

// ---------------------------------------------------------------------------
// Rotation helpers
// ---------------------------------------------------------------------------

/// Cross-product matrix `[w]x`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues exponential map.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-16 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * k * k
}

/// Inverse of [`exp_so3`]; returns the axis-angle vector.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let s = w.norm();
    let c = (r.trace() - 1.0) * 0.5;
    if c > 0.0 {
        let angle = s.atan2(c);
        if s < 1e-12 {
            return w;
        }
        return w * (angle / s);
    }
    // Near π the antisymmetric part vanishes; use the symmetric part instead.
    nalgebra::Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Rotation angle in radians of `r`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
    s.atan2((r.trace() - 1.0) * 0.5)
}

/// Angle between two rotations, `angle(a^T b)`.
pub fn rotation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

/// Nearest rotation in the Frobenius sense (polar decomposition, det +1).
///
/// Rank-deficient inputs are accepted as long as the rank is at least two;
/// the missing column is fixed by the determinant constraint.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Max-norm of `R^T R - I`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Unit vector orthogonal to `n`, chosen deterministically.
pub fn any_orthogonal(n: &Vector3<f64>) -> Vector3<f64> {
    let a = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    n.cross(&a).normalize()
}

// ---------------------------------------------------------------------------
// Pose
// ---------------------------------------------------------------------------

/// Rigid transform `T_cw` (world -> camera).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix. Matrices within 1e-6 of
    /// orthonormal are projected onto SO(3); anything further off is rejected.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite())
            || !translation.iter().all(|v| v.is_finite())
            || orthonormality_error(&rotation) > 1e-6
            || rotation.determinant() <= 0.0
        {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self {
            rotation: nearest_rotation(&rotation),
            translation,
        })
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    /// Pose of a camera centred at `center` (world) with camera-to-world
    /// rotation `r_wc`.
    pub fn from_camera_center(r_wc: Matrix3<f64>, center: Vector3<f64>) -> Result<Self, GeometryError> {
        let r_cw = r_wc.transpose();
        Self::new(r_cw, -(r_cw * center))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// Camera centre in the source frame, `-R^T t`.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_direction(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn with_rotation(&self, rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: self.translation,
        }
    }

    pub fn with_translation(&self, translation: Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }

    /// Applies a left increment: `R <- Exp(dw) R`, `t <- t + dt`.
    pub fn retract(&self, dw: &Vector3<f64>, dt: &Vector3<f64>) -> Self {
        Self {
            rotation: nearest_rotation(&(exp_so3(dw) * self.rotation)),
            translation: self.translation + dt,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle (radians) and translation distance between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rotation_angle(&rel.rotation), rel.translation.norm())
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

// ---------------------------------------------------------------------------
// Camera
// ---------------------------------------------------------------------------

/// Pinhole intrinsics plus the raw-depth divisor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_scale: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        depth_scale: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fx.is_finite()) || !(fy > 0.0 && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(depth_scale > 0.0 && depth_scale.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("depth scale must be positive"));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            depth_scale,
            width,
            height,
        })
    }

    /// Default TUM RGB-D intrinsics (640x480, f = 525, depth scale 5000).
    pub fn tum_default() -> Self {
        Self {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            depth_scale: 5000.0,
            width: 640,
            height: 480,
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(p.z > MIN_DEPTH) {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        let inv_z = 1.0 / p.z;
        Ok(Vector2::new(
            self.fx * p.x * inv_z + self.cx,
            self.fy * p.y * inv_z + self.cy,
        ))
    }

    /// Jacobian of [`project`](Self::project) with respect to the camera-frame point.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let inv_z = 1.0 / p.z;
        let inv_z2 = inv_z * inv_z;
        Matrix2x3::new(
            self.fx * inv_z,
            0.0,
            -self.fx * p.x * inv_z2,
            0.0,
            self.fy * inv_z,
            -self.fy * p.y * inv_z2,
        )
    }

    /// Back-projects a pixel with a raw (unscaled) depth value.
    pub fn back_project(&self, pixel: &Vector2<f64>, depth_raw: f64) -> Result<Vector3<f64>, GeometryError> {
        if !(depth_raw.is_finite() && depth_raw > 0.0) {
            return Err(GeometryError::InvalidDepth(depth_raw));
        }
        Ok(self.back_project_metric(pixel.x, pixel.y, depth_raw / self.depth_scale))
    }

    /// Back-projects a pixel whose depth is already in meters.
    pub fn back_project_metric(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Unit-less viewing ray through a pixel (z = 1).
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>, margin: f64) -> bool {
        pixel.x >= margin
            && pixel.y >= margin
            && pixel.x <= self.width as f64 - 1.0 - margin
            && pixel.y <= self.height as f64 - 1.0 - margin
    }
}

// ---------------------------------------------------------------------------
// Planes
// ---------------------------------------------------------------------------

/// Plane `n·X + d = 0` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHessian {
    pub normal: Vector3<f64>,
    pub d: f64,
}

impl PlaneHessian {
    /// Normalizes `normal` (and scales `d` accordingly).
    pub fn new(normal: Vector3<f64>, d: f64) -> Result<Self, GeometryError> {
        let len = normal.norm();
        if !(len > 1e-12) || !len.is_finite() || !d.is_finite() {
            return Err(GeometryError::ZeroNormal);
        }
        Ok(Self {
            normal: normal / len,
            d: d / len,
        })
    }

    pub fn from_point_normal(point: &Vector3<f64>, normal: &Vector3<f64>) -> Result<Self, GeometryError> {
        let n = normal.try_normalize(1e-12).ok_or(GeometryError::ZeroNormal)?;
        Ok(Self {
            normal: n,
            d: -n.dot(point),
        })
    }

    /// The representative with `d <= 0`.
    pub fn canonical(&self) -> Self {
        if self.d > 0.0 {
            Self {
                normal: -self.normal,
                d: -self.d,
            }
        } else {
            *self
        }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.d
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.normal.x, self.normal.y, self.normal.z, self.d)
    }

    /// Orthogonal projection of `p` onto the plane.
    pub fn project_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p - self.normal * self.signed_distance(p)
    }

    /// Angle between normals, ignoring orientation, in radians.
    pub fn normal_angle(&self, other: &PlaneHessian) -> f64 {
        self.normal.dot(&other.normal).abs().clamp(0.0, 1.0).acos()
    }
}

/// Minimal plane parameters: azimuth, elevation, offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneParam {
    pub phi: f64,
    pub psi: f64,
    pub d: f64,
}

impl PlaneParam {
    pub fn to_hessian(&self) -> PlaneHessian {
        let (sp, cp) = self.phi.sin_cos();
        let (ss, cs) = self.psi.sin_cos();
        PlaneHessian {
            normal: Vector3::new(cs * cp, cs * sp, ss),
            d: self.d,
        }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.phi, self.psi, self.d)
    }
}

/// Azimuth/elevation of a unit vector, `(atan2(n_y, n_x), asin(n_z))`.
pub fn normal_angles(n: &Vector3<f64>) -> (f64, f64) {
    (n.y.atan2(n.x), n.z.clamp(-1.0, 1.0).asin())
}

/// Partial derivatives of [`normal_angles`] with respect to the normal.
pub fn normal_angles_jacobian(n: &Vector3<f64>) -> Matrix2x3<f64> {
    let rho2 = (n.x * n.x + n.y * n.y).max(1e-300);
    let c = (1.0 - n.z * n.z).max(1e-300).sqrt();
    Matrix2x3::new(-n.y / rho2, n.x / rho2, 0.0, 0.0, 0.0, 1.0 / c)
}

/// `q(pi) = (phi, psi, d)`.
pub fn plane_min_param(pi: &PlaneHessian) -> PlaneParam {
    let (phi, psi) = normal_angles(&pi.normal);
    PlaneParam { phi, psi, d: pi.d }
}

/// Maps a plane through `pose` (source -> target) using `T^{-T} pi`.
pub fn transform_plane(pi: &PlaneHessian, pose: &Pose) -> PlaneHessian {
    let n = pose.rotation() * pi.normal;
    let d = pi.d - n.dot(pose.translation());
    let len = n.norm();
    PlaneHessian {
        normal: n / len,
        d: d / len,
    }
}

// ---------------------------------------------------------------------------
// Manhattan frame
// ---------------------------------------------------------------------------

/// Dominant scene directions and the world -> Manhattan rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManhattanFrame {
    /// Columns are the dominant directions expressed in the world frame.
    pub axes: Matrix3<f64>,
    /// World -> Manhattan rotation.
    pub r_mw: Matrix3<f64>,
}

impl ManhattanFrame {
    pub fn new(r_mw: Matrix3<f64>) -> Result<Self, GeometryError> {
        if orthonormality_error(&r_mw) > 1e-6 || r_mw.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation);
        }
        let r_mw = nearest_rotation(&r_mw);
        Ok(Self {
            axes: r_mw.transpose(),
            r_mw,
        })
    }
}

/// Camera <- world rotation from the camera <- Manhattan rotation.
pub fn compose_world_rotation(r_cm: &Matrix3<f64>, frame: &ManhattanFrame) -> Matrix3<f64> {
    r_cm * frame.r_mw
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 1.0, 640, 480).unwrap()
    }

    #[test]
    fn compose_world_rotation_examples() {
        let id = ManhattanFrame::new(Matrix3::identity()).unwrap();
        assert_relative_eq!(compose_world_rotation(&Matrix3::identity(), &id), Matrix3::identity());

        let frame = ManhattanFrame::new(rot_x(0.3) * rot_z(-1.1)).unwrap();
        let r = compose_world_rotation(&frame.r_mw.transpose(), &frame);
        assert!((r - Matrix3::identity()).amax() < 1e-12);

        let frame = ManhattanFrame::new(rot_z(15f64.to_radians())).unwrap();
        let r = compose_world_rotation(&rot_z(30f64.to_radians()), &frame);
        assert!((r - rot_z(45f64.to_radians())).amax() < 1e-12);
    }

    #[test]
    fn project_examples() {
        let k = k100();
        let p = k.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Vector2::new(0.0, 0.0));
        let p = k.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Vector2::new(50.0, 0.0));
        assert!(matches!(
            k.project(&Vector3::zeros()),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn back_project_examples() {
        let k = k100();
        let p = k.back_project(&Vector2::new(50.0, 0.0), 2.0).unwrap();
        assert_eq!(p, Vector3::new(1.0, 0.0, 2.0));
        assert!(matches!(
            k.back_project(&Vector2::new(0.0, 0.0), 0.0),
            Err(GeometryError::InvalidDepth(_))
        ));
        assert!(k.back_project(&Vector2::new(0.0, 0.0), f64::NAN).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0.0, 1, 1).is_err());
    }

    #[test]
    fn plane_min_param_examples() {
        let q = plane_min_param(&PlaneHessian::new(Vector3::x(), 2.0).unwrap());
        assert_eq!((q.phi, q.psi, q.d), (0.0, 0.0, 2.0));
        let q = plane_min_param(&PlaneHessian::new(Vector3::y(), 1.0).unwrap());
        assert_relative_eq!(q.phi, FRAC_PI_2);
        assert_eq!(q.psi, 0.0);
        let n = Vector3::new(0.5, 0.5, 2f64.sqrt() / 2.0);
        let q = plane_min_param(&PlaneHessian { normal: n, d: 0.0 });
        assert_relative_eq!(q.phi, FRAC_PI_4, epsilon = 1e-12);
        assert_relative_eq!(q.psi, FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn transform_plane_examples() {
        let pi = PlaneHessian::new(Vector3::new(0.3, -0.2, 0.9), 1.5).unwrap();
        let out = transform_plane(&pi, &Pose::identity());
        assert_relative_eq!(out.normal, pi.normal, epsilon = 1e-15);
        assert_relative_eq!(out.d, pi.d, epsilon = 1e-15);

        // Camera origin at world (0, 0, 1), axes aligned with the world.
        let world = PlaneHessian::new(Vector3::z(), -2.0).unwrap();
        let pose = Pose::from_camera_center(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let cam = transform_plane(&world, &pose);
        assert_relative_eq!(cam.normal, Vector3::z(), epsilon = 1e-15);
        assert_relative_eq!(cam.d, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn canonical_sign() {
        let p = PlaneHessian::new(Vector3::z(), 2.0).unwrap().canonical();
        assert_eq!(p.normal, -Vector3::z());
        assert_eq!(p.d, -2.0);
        let q = PlaneHessian::new(Vector3::z(), -2.0).unwrap();
        assert_eq!(q.canonical(), q);
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(3.0 * PI), PI);
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(0.5), 0.5);
        assert_relative_eq!(wrap_angle(-2.0 * PI + 0.1), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn nearest_rotation_handles_rank_two() {
        let r = rot_x(0.4) * rot_y(-0.7);
        let mut m = r;
        m.set_column(2, &Vector3::zeros());
        let out = nearest_rotation(&m);
        assert!((out - r).amax() < 1e-12);
    }

    #[test]
    fn pose_rejects_non_rotation() {
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        assert!(Pose::new(-Matrix3::identity(), Vector3::zeros()).is_err());
    }

    fn arb_rotation() -> impl Strategy<Value = Matrix3<f64>> {
        (-PI..PI, -PI..PI, -PI..PI).prop_map(|(a, b, c)| rot_z(a) * rot_y(b) * rot_x(c))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (arb_rotation(), -5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64)
            .prop_map(|(r, x, y, z)| Pose::new(r, Vector3::new(x, y, z)).unwrap())
    }

    fn arb_unit() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter_map("non-zero", |(x, y, z)| Vector3::new(x, y, z).try_normalize(0.1))
    }

    proptest! {
        #[test]
        fn pose_round_trip(a in arb_pose(), b in arb_pose()) {
            let id = a.compose(&a.inverse());
            prop_assert!((id.rotation() - Matrix3::identity()).amax() < 1e-9);
            prop_assert!(id.translation().norm() < 1e-9);
            let ab = a.compose(&b);
            prop_assert!(orthonormality_error(ab.rotation()) < 1e-9);
            prop_assert!((ab.rotation().determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn project_back_project_round_trip(
            u in 0.0..640.0f64, v in 0.0..480.0f64, z in 0.1..10.0f64
        ) {
            let k = CameraIntrinsics::new(525.0, 520.0, 319.5, 239.5, 5000.0, 640, 480).unwrap();
            let raw = z * k.depth_scale;
            let p = k.back_project(&Vector2::new(u, v), raw).unwrap();
            let px = k.project(&p).unwrap();
            prop_assert!((px - Vector2::new(u, v)).norm() < 1e-9);
        }

        #[test]
        fn min_param_round_trip(n in arb_unit(), d in -5.0..5.0f64) {
            prop_assume!(n.z.abs() < 1.0 - 1e-6);
            let pi = PlaneHessian { normal: n, d };
            let back = plane_min_param(&pi).to_hessian();
            prop_assert!((back.normal - n).norm() < 1e-9);
            prop_assert_eq!(back.d, d);
        }

        #[test]
        fn transform_plane_keeps_incidence(
            n in arb_unit(), d in -5.0..5.0f64, pose in arb_pose(),
            s in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 10)
        ) {
            let pi = PlaneHessian { normal: n, d };
            let e1 = any_orthogonal(&n);
            let e2 = n.cross(&e1);
            let target = transform_plane(&pi, &pose);
            prop_assert!((target.normal.norm() - 1.0).abs() < 1e-12);
            for (a, b) in s {
                let x = -n * d + e1 * a + e2 * b;
                let xt = pose.transform_point(&x);
                prop_assert!(target.signed_distance(&xt).abs() < 1e-9);
            }
        }

        #[test]
        fn exp_log_round_trip(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
            let w = Vector3::new(x, y, z);
            let r = exp_so3(&w);
            prop_assert!(orthonormality_error(&r) < 1e-12);
            prop_assert!((log_so3(&r) - w).norm() < 1e-9);
        }
    }
}
