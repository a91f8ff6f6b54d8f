//! Rotation helpers: Rodrigues exponential/logarithm and derivatives.
//!
//! Rotations are carried as minimal 3-vectors `r` with `R = exp([r]x)`.
//! Series expansions take over below `SMALL_ANGLE` so Jacobians stay finite
//! through the identity.

use nalgebra::{Matrix3, Vector3};

/// Below this angle (rad) trigonometric ratios switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Skew-symmetric (cross-product) matrix: `skew(t) * x == t.cross(&x)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula: rotation matrix from a rotation vector.
pub fn exp_so3(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // sin(t)/t and (1-cos(t))/t^2
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation vector from a rotation matrix (inverse of [`exp_so3`]).
pub fn log_so3(rot: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((rot.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let axis_raw = Vector3::new(
        rot[(2, 1)] - rot[(1, 2)],
        rot[(0, 2)] - rot[(2, 0)],
        rot[(1, 0)] - rot[(0, 1)],
    );
    if theta < SMALL_ANGLE {
        return axis_raw * 0.5 * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near 180 deg the skew part vanishes; recover the axis from the
        // dominant diagonal of R + I.
        let m = rot + Matrix3::identity();
        let col = (0..3).max_by(|&a, &b| m[(a, a)].partial_cmp(&m[(b, b)]).unwrap()).unwrap();
        let mut axis = Vector3::new(m[(0, col)], m[(1, col)], m[(2, col)]).normalize();
        // Pick the sign consistent with the (possibly tiny) skew part.
        if axis.dot(&axis_raw) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    axis_raw * (theta / (2.0 * theta.sin()))
}

/// Left Jacobian of SO(3): `exp([r + d]x) ~= exp([J_l(r) d]x) exp([r]x)`.
pub fn left_jacobian(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let (b, c) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // (1-cos t)/t^2 and (t-sin t)/t^3
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

/// Derivative of the rotated point `R(r) p` with respect to `r` (3x3).
pub fn rotate_point_jacobian(r: &Vector3<f64>, rotated: &Vector3<f64>) -> Matrix3<f64> {
    -skew(rotated) * left_jacobian(r)
}

/// Rotation from XYZ Euler angles in degrees (roll, pitch, yaw applied as Rz*Ry*Rx).
pub fn rotation_from_euler_deg(angles: &Vector3<f64>) -> Matrix3<f64> {
    let r = angles * std::f64::consts::PI / 180.0;
    *nalgebra::Rotation3::from_euler_angles(r.x, r.y, r.z).matrix()
}
