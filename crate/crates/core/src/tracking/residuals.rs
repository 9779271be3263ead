//! Residuals and their Jacobians with respect to a left pose increment.
//!
//! Every Jacobian has columns `[δθ, δt]` for the update
//! `R <- Exp(δθ) R`, `t <- t + δt` of a world-to-camera pose.

use super::TrackingError;
use crate::geometry::{normal_angles, normal_angles_jacobian, skew, wrap_angle, CameraIntrinsics, PlaneHessian, Pose};
use nalgebra::{Matrix2x6, Matrix3, Matrix3x6, RowVector6, Vector2, Vector3};

/// Camera-frame point and its derivative with respect to the pose update.
fn transform_with_jacobian(pose: &Pose, p: &Vector3<f64>) -> (Vector3<f64>, Matrix3x6<f64>) {
    let rp = pose.rotation() * p;
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rp)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    (rp + pose.translation(), j)
}

fn project_checked(k: &CameraIntrinsics, xc: &Vector3<f64>) -> Result<Vector2<f64>, TrackingError> {
    k.project(xc).map_err(|_| TrackingError::BehindCamera)
}

/// Reprojection error `p_obs - Π(R P + t)` in pixels.
pub fn point_residual(
    observed: &Vector2<f64>,
    point: &Vector3<f64>,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<(Vector2<f64>, Matrix2x6<f64>), TrackingError> {
    let (xc, dx) = transform_with_jacobian(pose, point);
    let projected = project_checked(k, &xc)?;
    Ok((observed - projected, -(k.project_jacobian(&xc) * dx)))
}

/// Line function evaluated at the projection of a 3D endpoint,
/// `l · (Π(R P + t), 1)`.
pub fn line_residual(
    line: &Vector3<f64>,
    endpoint: &Vector3<f64>,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<(f64, RowVector6<f64>), TrackingError> {
    let (xc, dx) = transform_with_jacobian(pose, endpoint);
    let projected = project_checked(k, &xc)?;
    let value = line.x * projected.x + line.y * projected.y + line.z;
    let dl = nalgebra::RowVector2::new(line.x, line.y);
    Ok((value, dl * k.project_jacobian(&xc) * dx))
}

/// Difference of minimal parameters `q(π_obs) - q(T π_map)` with the
/// azimuth wrapped to `(-π, π]`.
///
/// The transformed map plane is flipped to the side of the observed normal
/// first, so opposite representatives of the same plane compare equal.
pub fn plane_residual(
    observed: &PlaneHessian,
    map_plane: &PlaneHessian,
    pose: &Pose,
) -> (Vector3<f64>, Matrix3x6<f64>) {
    let mut n = pose.rotation() * map_plane.normal;
    let mut d = map_plane.d - n.dot(pose.translation());
    if n.dot(&observed.normal) < 0.0 {
        n = -n;
        d = -d;
    }
    let (phi_o, psi_o) = normal_angles(&observed.normal);
    let (phi, psi) = normal_angles(&n);
    let r = Vector3::new(wrap_angle(phi_o - phi), psi_o - psi, observed.d - d);
    // δn = -[n]x δθ for either sign of n.
    let dn_dtheta = -skew(&n);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(-(normal_angles_jacobian(&n) * dn_dtheta)));
    // d = s (d_map - (R n_map)·t): δd = -t·δn along θ and -n along t.
    let t = pose.translation();
    j.fixed_view_mut::<1, 3>(2, 0).copy_from(&(t.transpose() * dn_dtheta));
    j.fixed_view_mut::<1, 3>(2, 3).copy_from(&n.transpose());
    (r, j)
}

/// Parallelism between an observed normal (camera frame) and a map normal
/// (world frame): the azimuth/elevation difference after sign alignment.
pub fn parallel_residual(
    observed: &Vector3<f64>,
    map_normal: &Vector3<f64>,
    pose: &Pose,
) -> (Vector2<f64>, Matrix2x6<f64>) {
    let mut n = pose.rotation() * map_normal;
    if n.dot(observed) < 0.0 {
        n = -n;
    }
    let (phi_o, psi_o) = normal_angles(observed);
    let (phi, psi) = normal_angles(&n);
    let r = Vector2::new(wrap_angle(phi_o - phi), psi_o - psi);
    let mut j = Matrix2x6::zeros();
    j.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(normal_angles_jacobian(&n) * skew(&n)));
    (r, j)
}

/// Deviation from orthogonality, `asin(n_obs · R n_map)`; zero exactly when
/// the normals are perpendicular and equal in magnitude to `90° - angle`.
pub fn perpendicular_residual(
    observed: &Vector3<f64>,
    map_normal: &Vector3<f64>,
    pose: &Pose,
) -> (f64, RowVector6<f64>) {
    let n = pose.rotation() * map_normal;
    let c = observed.dot(&n).clamp(-1.0, 1.0);
    let scale = 1.0 / (1.0 - c * c).max(1e-300).sqrt();
    // δ(n_obs·n) = n_obs · (-[n]x δθ) = (n × n_obs) · δθ.
    let dtheta = n.cross(observed) * scale;
    let mut j = RowVector6::zeros();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&dtheta.transpose());
    (c.asin(), j)
}
