//! Unit quaternion algebra for orientation splines.
//!
//! Quaternions use the Hamilton convention and are stored w-first, so the
//! identity is `[1, 0, 0, 0]`. `R(q)` maps body-frame vectors to the world
//! frame: `R(q) v = q • v • q⁻¹`.
//!
//! The exponential map at identity takes a rotation vector `ν` (radians) to
//! `[cos(‖ν‖/2), sin(‖ν‖/2) ν/‖ν‖]`; the logarithm is its inverse on
//! `‖ν‖ < π`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, Vector3, Vector4};

/// Tangent-space element at the identity (rotation vector, radians).
pub type RotVec = Vector3<f64>;

const EXP_TAYLOR_BELOW: f64 = 1e-8;
const JAC_TAYLOR_BELOW: f64 = 1e-6;

/// Hamilton unit quaternion, w-first.
#[derive(Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.w, self.x, self.y, self.z)
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Builds a quaternion from raw components and normalizes it.
    ///
    /// Panics if the components are all zero or not finite.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::from_vector4(&Vector4::new(w, x, y, z))
    }

    /// Builds from a w-first 4-vector, normalizing it.
    pub fn from_vector4(v: &Vector4<f64>) -> Self {
        let n = v.norm();
        assert!(n.is_finite() && n > 0.0, "quaternion must be finite and nonzero");
        let v = v / n;
        Self { w: v[0], x: v[1], y: v[2], z: v[3] }
    }

    /// Builds from a proper rotation matrix.
    pub fn from_rotmat(m: &Matrix3<f64>) -> Self {
        // Shepperd's method: pick the largest diagonal term to divide by.
        let tr = m.trace();
        let v = if tr > m[(0, 0)] && tr > m[(1, 1)] && tr > m[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            Vector4::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Vector4::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Vector4::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Vector4::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        Self::from_vector4(&v)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    /// Vector part `[x, y, z]`.
    pub fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Components as a w-first 4-vector.
    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector4().norm()
    }

    /// Re-projects onto the unit sphere.
    pub fn normalize(&self) -> Self {
        Self::from_vector4(&self.as_vector4())
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Inverse of a unit quaternion (its conjugate).
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// `q` and `-q` are the same rotation; returns the representative with `w ≥ 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        }
    }

    /// Rotates `v` by `q`: `q • v • q⁻¹`.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_rotmat() * v
    }

    /// Rotates `v` by `q⁻¹`: `q⁻¹ • v • q`.
    pub fn inverse_rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_rotmat().transpose() * v
    }

    pub fn to_rotmat(&self) -> Matrix3<f64> {
        to_rotmat(self)
    }

    /// Angle of the rotation in `[0, π]`.
    pub fn angle(&self) -> f64 {
        log_at_identity(self).norm()
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: UnitQuaternion) -> UnitQuaternion {
        hamilton_product(&self, &rhs)
    }
}

/// Raw Hamilton product of two w-first 4-vectors, no normalization.
pub(crate) fn product4(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (w1, x1, y1, z1) = (a[0], a[1], a[2], a[3]);
    let (w2, x2, y2, z2) = (b[0], b[1], b[2], b[3]);
    Vector4::new(
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    )
}

/// `a • b`, re-normalized.
pub fn hamilton_product(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion::from_vector4(&product4(&a.as_vector4(), &b.as_vector4()))
}

pub fn exp_at_identity(nu: &RotVec) -> UnitQuaternion {
    let theta = nu.norm();
    if theta < EXP_TAYLOR_BELOW {
        let t2 = theta * theta;
        let s = 0.5 - t2 / 48.0;
        return UnitQuaternion::from_vector4(&Vector4::new(1.0 - t2 / 8.0, s * nu.x, s * nu.y, s * nu.z));
    }
    let half = 0.5 * theta;
    let s = half.sin() / theta;
    UnitQuaternion::from_vector4(&Vector4::new(half.cos(), s * nu.x, s * nu.y, s * nu.z))
}

/// Logarithm at identity, canonicalized to `w ≥ 0` first.
pub fn log_at_identity(q: &UnitQuaternion) -> RotVec {
    let q = q.canonical();
    let v = q.vec();
    let n = v.norm();
    if n < EXP_TAYLOR_BELOW {
        // atan2(n, w) ≈ n/w for tiny n.
        return v * (2.0 / q.w);
    }
    let theta = 2.0 * n.atan2(q.w);
    v * (theta / n)
}

pub fn to_rotmat(q: &UnitQuaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    Matrix3::new(
        1.0 - 2.0 * (yy + zz),
        2.0 * (xy - wz),
        2.0 * (xz + wy),
        2.0 * (xy + wz),
        1.0 - 2.0 * (xx + zz),
        2.0 * (yz - wx),
        2.0 * (xz - wy),
        2.0 * (yz + wx),
        1.0 - 2.0 * (xx + yy),
    )
}

/// `left_matrix(a) · b = a • b` with quaternions as 4-vectors.
pub fn left_matrix(q: &UnitQuaternion) -> Matrix4<f64> {
    left_matrix4(&q.as_vector4())
}

/// `right_matrix(b) · a = a • b` with quaternions as 4-vectors.
pub fn right_matrix(q: &UnitQuaternion) -> Matrix4<f64> {
    right_matrix4(&q.as_vector4())
}

pub(crate) fn left_matrix4(q: &Vector4<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

pub(crate) fn right_matrix4(q: &Vector4<f64>) -> Matrix4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Jacobian of `exp_at_identity(ν)` (as a 4-vector) with respect to `ν`.
pub fn d_exp_d_nu(nu: &RotVec) -> Matrix4x3<f64> {
    let theta = nu.norm();
    let (s, ds_over_theta) = if theta < JAC_TAYLOR_BELOW {
        // s(θ) = sin(θ/2)/θ ≈ 1/2 − θ²/48, s'(θ)/θ ≈ −1/24 + θ²/960
        (0.5 - theta * theta / 48.0, -1.0 / 24.0 + theta * theta / 960.0)
    } else {
        let half = 0.5 * theta;
        let (sh, ch) = half.sin_cos();
        (sh / theta, (0.5 * ch * theta - sh) / (theta * theta * theta))
    };
    let mut jac = Matrix4x3::zeros();
    let dw = -0.5 * s * nu.transpose();
    jac.fixed_view_mut::<1, 3>(0, 0).copy_from(&dw);
    let dv = Matrix3::identity() * s + nu * nu.transpose() * ds_over_theta;
    jac.fixed_view_mut::<3, 3>(1, 0).copy_from(&dv);
    jac
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Jacobian of `q⁻¹ • v • q` with respect to the four components of `q`.
///
/// `q⁻¹` is the true inverse `q*/‖q‖²`, so the function is invariant to the
/// scale of `q` and the Jacobian is orthogonal to `q` (`J q = 0`).
pub fn d_conjugation_d_q(q: &UnitQuaternion, v: &Vector3<f64>) -> Matrix3x4<f64> {
    d_sandwich(q, v, -1.0)
}

/// Jacobian of `q • v • q⁻¹` with respect to the four components of `q`.
pub fn d_rotation_d_q(q: &UnitQuaternion, v: &Vector3<f64>) -> Matrix3x4<f64> {
    d_sandwich(q, v, 1.0)
}

fn d_sandwich(q: &UnitQuaternion, v: &Vector3<f64>, sign: f64) -> Matrix3x4<f64> {
    let w = q.w;
    let u = q.vec();
    // Homogeneous quadratic form g(q) = (w² − uᵀu) v + 2 u (uᵀv) + sign·2w (u × v).
    let f = if sign > 0.0 { q.rotate(v) } else { q.inverse_rotate(v) };
    let mut jac = Matrix3x4::zeros();
    let dw = (v * w + u.cross(v) * sign) * 2.0;
    jac.fixed_view_mut::<3, 1>(0, 0).copy_from(&dw);
    let du = (Matrix3::identity() * u.dot(v) + u * v.transpose() - v * u.transpose() - skew(v) * (w * sign)) * 2.0;
    jac.fixed_view_mut::<3, 3>(0, 1).copy_from(&du);
    // Divide by ‖q‖² and differentiate it: J = J_quad − 2 f qᵀ at ‖q‖ = 1.
    jac - f * q.as_vector4().transpose() * 2.0
}
