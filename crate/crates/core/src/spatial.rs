//! Rotation, Euler-angle and skew-matrix algebra.
//!
//! Attitude is parametrized by roll-pitch-yaw angles composed as
//! `R_eb = Rz(psi) * Ry(theta) * Rx(phi)`. With this composition the body
//! angular velocity is `omega_b = Xi(xi) * xi_dot` and `R_dot = R * S(omega_b)`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Roll, pitch and yaw in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
}

impl EulerAngles {
    pub fn new(phi: f64, theta: f64, psi: f64) -> Self {
        Self { phi, theta, psi }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.phi, self.theta, self.psi)
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.theta.is_finite() && self.psi.is_finite()
    }

    /// Roll and pitch strictly inside `(-pi/2, pi/2)`.
    pub fn in_valid_region(&self) -> bool {
        self.is_finite() && self.phi.abs() < FRAC_PI_2 && self.theta.abs() < FRAC_PI_2
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R_eb` for the given roll-pitch-yaw angles.
pub fn rotation_from_euler(xi: EulerAngles) -> Matrix3<f64> {
    rot_z(xi.psi) * rot_y(xi.theta) * rot_x(xi.phi)
}

/// Euler-rate matrix `Xi(xi)` with `omega_b = Xi(xi) * xi_dot`.
///
/// `det Xi = cos(theta)`; callers must check invertibility before inverting.
pub fn euler_rate_matrix(xi: EulerAngles) -> Matrix3<f64> {
    let (sp, cp) = xi.phi.sin_cos();
    let (st, ct) = xi.theta.sin_cos();
    Matrix3::new(1.0, 0.0, -st, 0.0, cp, sp * ct, 0.0, -sp, cp * ct)
}

/// Time derivative of `Xi(xi)` along `xi_dot`.
pub fn euler_rate_matrix_dot(xi: EulerAngles, xi_dot: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = xi.phi.sin_cos();
    let (st, ct) = xi.theta.sin_cos();
    let (dphi, dtheta) = (xi_dot.x, xi_dot.y);
    Matrix3::new(
        0.0,
        0.0,
        -ct * dtheta,
        0.0,
        -sp * dphi,
        cp * ct * dphi - sp * st * dtheta,
        0.0,
        -cp * dphi,
        -sp * ct * dphi - cp * st * dtheta,
    )
}

/// Inverse of `Xi(xi)`, or `None` when `|cos theta|` is below `tol`.
pub fn euler_rate_matrix_inverse(xi: EulerAngles, tol: f64) -> Option<Matrix3<f64>> {
    let (sp, cp) = xi.phi.sin_cos();
    let (st, ct) = xi.theta.sin_cos();
    if ct.abs() < tol {
        return None;
    }
    let tt = st / ct;
    Some(Matrix3::new(
        1.0,
        sp * tt,
        cp * tt,
        0.0,
        cp,
        -sp,
        0.0,
        sp / ct,
        cp / ct,
    ))
}

/// Skew matrix with `skew(v) * b == v x b`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] on the skew-symmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Gravity direction in the body frame, `gamma = R_eb^T e3`.
pub fn gravity_direction(xi: EulerAngles) -> Vector3<f64> {
    let (sp, cp) = xi.phi.sin_cos();
    let (st, ct) = xi.theta.sin_cos();
    Vector3::new(-st, sp * ct, cp * ct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn angles() -> impl Strategy<Value = EulerAngles> {
        (-1.4..1.4f64, -1.4..1.4f64, -PI..PI).prop_map(|(a, b, c)| EulerAngles::new(a, b, c))
    }

    #[test]
    fn zero_angles_give_identity() {
        let xi = EulerAngles::default();
        assert_relative_eq!(rotation_from_euler(xi), Matrix3::identity());
        assert_relative_eq!(euler_rate_matrix(xi), Matrix3::identity());
        assert_relative_eq!(gravity_direction(xi), Vector3::z());
    }

    #[test]
    fn pure_yaw_maps_e1_to_e2() {
        let r = rotation_from_euler(EulerAngles::new(0.0, 0.0, PI / 2.0));
        assert_relative_eq!(r * Vector3::x(), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn euler_rate_matrix_singular_at_vertical_pitch() {
        let xi = EulerAngles::new(0.3, PI / 2.0, -0.2);
        assert!(euler_rate_matrix(xi).determinant().abs() < 1e-15);
        assert!(euler_rate_matrix_inverse(xi, 1e-6).is_none());
    }

    #[test]
    fn agrees_with_nalgebra_roll_pitch_yaw() {
        let xi = EulerAngles::new(0.3, -0.7, 2.1);
        let r = nalgebra::Rotation3::from_euler_angles(xi.phi, xi.theta, xi.psi);
        assert_relative_eq!(rotation_from_euler(xi), *r.matrix(), epsilon = 1e-14);
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_relative_eq!(skew(&Vector3::z()) * Vector3::x(), Vector3::y());
    }

    #[test]
    fn pitch_quarter_turn_gravity() {
        let xi = EulerAngles::new(0.0, PI / 4.0, 0.0);
        let expected = rotation_from_euler(xi).transpose() * Vector3::z();
        assert_relative_eq!(gravity_direction(xi), expected, epsilon = 1e-15);
        let s = (PI / 4.0).sin();
        assert_relative_eq!(gravity_direction(xi), Vector3::new(-s, 0.0, s), epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(xi in angles()) {
            let r = rotation_from_euler(xi);
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        // Central differences of R along xi_dot reproduce R * S(Xi * xi_dot).
        #[test]
        fn rotation_derivative_matches_body_rate(
            xi in angles(),
            rate in prop::array::uniform3(-2.0..2.0f64),
        ) {
            let xi_dot = Vector3::from(rate);
            let h = 1e-6;
            let plus = EulerAngles::from_vector(&(xi.to_vector() + xi_dot * h));
            let minus = EulerAngles::from_vector(&(xi.to_vector() - xi_dot * h));
            let r_dot = (rotation_from_euler(plus) - rotation_from_euler(minus)) / (2.0 * h);
            let omega = euler_rate_matrix(xi) * xi_dot;
            let predicted = rotation_from_euler(xi) * skew(&omega);
            prop_assert!((r_dot - predicted).norm() < 1e-6);
        }

        #[test]
        fn euler_rate_inverse_is_inverse(xi in angles()) {
            let inv = euler_rate_matrix_inverse(xi, 1e-6).unwrap();
            prop_assert!((inv * euler_rate_matrix(xi) - Matrix3::identity()).norm() < 1e-12);
        }

        #[test]
        fn euler_rate_dot_matches_finite_difference(
            xi in angles(),
            rate in prop::array::uniform3(-2.0..2.0f64),
        ) {
            let xi_dot = Vector3::from(rate);
            let h = 1e-6;
            let plus = EulerAngles::from_vector(&(xi.to_vector() + xi_dot * h));
            let minus = EulerAngles::from_vector(&(xi.to_vector() - xi_dot * h));
            let fd = (euler_rate_matrix(plus) - euler_rate_matrix(minus)) / (2.0 * h);
            prop_assert!((fd - euler_rate_matrix_dot(xi, &xi_dot)).norm() < 1e-8);
        }

        #[test]
        fn skew_is_cross_product(v in prop::array::uniform3(-5.0..5.0f64), b in prop::array::uniform3(-5.0..5.0f64)) {
            let (v, b) = (Vector3::from(v), Vector3::from(b));
            let s = skew(&v);
            prop_assert!((s * b - v.cross(&b)).norm() < 1e-12);
            prop_assert!((s.transpose() + s).norm() == 0.0);
            prop_assert!((vee(&s) - v).norm() == 0.0);
        }

        #[test]
        fn gravity_direction_is_unit_and_advected(
            xi in angles(),
            rate in prop::array::uniform3(-2.0..2.0f64),
        ) {
            let gamma = gravity_direction(xi);
            prop_assert!((gamma.norm() - 1.0).abs() < 1e-14);
            let r_t_e3 = rotation_from_euler(xi).transpose() * Vector3::z();
            prop_assert!((gamma - r_t_e3).norm() < 1e-15);
            // gamma_dot = -S(omega) gamma along an Euler-rate direction.
            let xi_dot = Vector3::from(rate);
            let h = 1e-6;
            let plus = gravity_direction(EulerAngles::from_vector(&(xi.to_vector() + xi_dot * h)));
            let minus = gravity_direction(EulerAngles::from_vector(&(xi.to_vector() - xi_dot * h)));
            let omega = euler_rate_matrix(xi) * xi_dot;
            prop_assert!(((plus - minus) / (2.0 * h) + omega.cross(&gamma)).norm() < 1e-8);
        }
    }
}
