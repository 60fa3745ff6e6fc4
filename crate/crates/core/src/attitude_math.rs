//! Scalar-first quaternion algebra and the Modified Rodrigues Parameter
//! attitude-error representation shared by the simulator, the nonlinear MPC
//! and the policy featurizer.
//!
//! Quaternions are stored as `[q_w, q_x, q_y, q_z]` in a `Vector4<f64>` and
//! rotate body-frame vectors into the world frame.

use nalgebra::{Matrix3, Matrix4, Matrix4x3, Vector3, Vector4};

pub const QUAT_IDENTITY: Vector4<f64> = Vector4::new(1.0, 0.0, 0.0, 0.0);

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Hamilton product a ⊙ b (scalar-first).
pub fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (aw, av) = (a[0], Vector3::new(a[1], a[2], a[3]));
    let (bw, bv) = (b[0], Vector3::new(b[1], b[2], b[3]));
    let w = aw * bw - av.dot(&bv);
    let v = aw * bv + bw * av + av.cross(&bv);
    Vector4::new(w, v.x, v.y, v.z)
}

pub fn quat_conj(q: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(q[0], -q[1], -q[2], -q[3])
}

pub fn quat_normalize(q: &Vector4<f64>) -> Vector4<f64> {
    q / q.norm()
}

/// Rotation matrix R(q) mapping body to world coordinates.
pub fn quat_to_rot(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
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

pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Vector4<f64> {
    let n = axis.norm();
    if n < 1e-15 {
        return QUAT_IDENTITY;
    }
    let half = 0.5 * angle;
    let v = axis * (half.sin() / n);
    Vector4::new(half.cos(), v.x, v.y, v.z)
}

/// Kinematic matrix Ω(ω) such that q̇ = ½ Ω(ω) q.
pub fn omega_matrix(w: &Vector3<f64>) -> Matrix4<f64> {
    Matrix4::new(
        0.0, -w.x, -w.y, -w.z, //
        w.x, 0.0, w.z, -w.y, //
        w.y, -w.z, 0.0, w.x, //
        w.z, w.y, -w.x, 0.0,
    )
}

/// Jacobian of ½ Ω(ω) q with respect to ω (4×3), used by the NMPC integrator.
pub fn half_xi_matrix(q: &Vector4<f64>) -> Matrix4x3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    0.5 * Matrix4x3::new(
        -x, -y, -z, //
        w, -z, y, //
        z, w, -x, //
        -y, x, w,
    )
}

/// MRP vector of a single quaternion: q_v / (1 + q_w), with the shadow-set
/// sign flip applied for q_w < 0 so the q_w = −1 singularity is never hit.
pub fn quat_to_mrp(q: &Vector4<f64>) -> Vector3<f64> {
    let q = if q[0] < 0.0 { -*q } else { *q };
    Vector3::new(q[1], q[2], q[3]) / (1.0 + q[0])
}

/// Inverse of [`quat_to_mrp`].
pub fn mrp_to_quat(s: &Vector3<f64>) -> Vector4<f64> {
    let n2 = s.norm_squared();
    let scale = 1.0 / (1.0 + n2);
    Vector4::new((1.0 - n2) * scale, 1.0, 1.0, 1.0).component_mul(&Vector4::new(
        1.0,
        2.0 * s.x * scale,
        2.0 * s.y * scale,
        2.0 * s.z * scale,
    ))
}

/// Three-dimensional attitude error ε = MRP(q ⊙ q_ref⁻¹).
pub fn mrp_error(q: &Vector4<f64>, q_ref: &Vector4<f64>) -> Vector3<f64> {
    quat_to_mrp(&quat_mul(q, &quat_conj(q_ref)))
}

/// Applies an MRP-coordinate attitude offset to a reference quaternion,
/// inverting [`mrp_error`]: returns q with mrp_error(q, q_ref) = ε.
pub fn apply_mrp_error(eps: &Vector3<f64>, q_ref: &Vector4<f64>) -> Vector4<f64> {
    quat_normalize(&quat_mul(&mrp_to_quat(eps), q_ref))
}

/// Intrinsic z-y-x Euler angles (yaw ψ, pitch θ, roll φ) of R(q).
pub fn quat_to_euler_zyx(q: &Vector4<f64>) -> (f64, f64, f64) {
    let r = quat_to_rot(q);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    (yaw, pitch, roll)
}

pub fn quat_from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Vector4<f64> {
    let qz = quat_from_axis_angle(&Vector3::z(), yaw);
    let qy = quat_from_axis_angle(&Vector3::y(), pitch);
    let qx = quat_from_axis_angle(&Vector3::x(), roll);
    quat_mul(&quat_mul(&qz, &qy), &qx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quat_mul_matches_rotation_composition() {
        let a = quat_from_axis_angle(&Vector3::new(1.0, 2.0, -0.5), 0.7);
        let b = quat_from_axis_angle(&Vector3::new(-0.3, 1.0, 2.0), -1.2);
        let r_ab = quat_to_rot(&quat_mul(&a, &b));
        assert_relative_eq!(r_ab, quat_to_rot(&a) * quat_to_rot(&b), epsilon = 1e-12);
    }

    #[test]
    fn mrp_quarter_turn() {
        // 90 deg about x against the identity: tan(22.5 deg) on the x axis.
        let q = quat_from_axis_angle(&Vector3::x(), std::f64::consts::FRAC_PI_2);
        let eps = mrp_error(&q, &QUAT_IDENTITY);
        assert_relative_eq!(eps.x, (std::f64::consts::PI / 8.0).tan(), epsilon = 1e-12);
        assert_relative_eq!(eps.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(eps.z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mrp_half_turn_is_unit() {
        let q = quat_from_axis_angle(&Vector3::x(), std::f64::consts::PI);
        let eps = mrp_error(&q, &QUAT_IDENTITY);
        assert_relative_eq!(eps.x, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mrp_sign_invariance() {
        let q = quat_from_axis_angle(&Vector3::new(0.2, -1.0, 0.4), 2.1);
        let qr = quat_from_axis_angle(&Vector3::new(1.0, 0.1, 0.0), -0.6);
        assert_relative_eq!(mrp_error(&q, &qr), mrp_error(&(-q), &qr), epsilon = 1e-12);
    }

    #[test]
    fn mrp_round_trip() {
        let qr = quat_from_axis_angle(&Vector3::new(0.3, 0.3, -1.0), 1.4);
        let q = quat_from_axis_angle(&Vector3::new(-0.2, 1.0, 0.5), 0.9);
        let eps = mrp_error(&q, &qr);
        let back = apply_mrp_error(&eps, &qr);
        // Same rotation up to global sign.
        let d = quat_mul(&back, &quat_conj(&q));
        assert_relative_eq!(d[0].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn euler_round_trip() {
        let q = quat_from_euler_zyx(0.4, -0.3, 0.8);
        let (y, p, r) = quat_to_euler_zyx(&q);
        assert_relative_eq!(y, 0.4, epsilon = 1e-12);
        assert_relative_eq!(p, -0.3, epsilon = 1e-12);
        assert_relative_eq!(r, 0.8, epsilon = 1e-12);
    }
}
