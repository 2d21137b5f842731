//! Uniform cubic B-splines for 6-DoF trajectories.
//!
//! Position is a standard cubic B-spline over four control points. Orientation
//! is a cumulative quaternion B-spline: a base quaternion followed by the
//! product of `Exp(λ_i δ_i)` over the four tangent increments `δ_i`, where the
//! cumulative weights `λ` come from [`cumulative_basis_matrix`]. All time
//! derivatives are returned in SI units; the `1/τ` chain-rule factors are
//! applied here, not by callers.
//!
//! Segment `k` of a grid covers `[t0 + kτ, t0 + (k+1)τ)` and uses control
//! points `k..k+4`.

use nalgebra::{Matrix3, Matrix4, Matrix4x3, SMatrix, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::so3::{
    d_conjugation_d_q, d_exp_d_nu, exp_at_identity, left_matrix4, log_at_identity, product4, right_matrix4, RotVec,
    UnitQuaternion,
};

pub type Matrix3x12 = SMatrix<f64, 3, 12>;
pub type Matrix4x12 = SMatrix<f64, 4, 12>;

/// Temporal derivative order of a kinematic query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Derivative {
    Value,
    First,
    Second,
}

impl TryFrom<u8> for Derivative {
    type Error = Error;

    fn try_from(order: u8) -> Result<Self> {
        match order {
            0 => Ok(Derivative::Value),
            1 => Ok(Derivative::First),
            2 => Ok(Derivative::Second),
            other => Err(Error::InvalidOrder(other)),
        }
    }
}

impl Derivative {
    fn order(self) -> u8 {
        match self {
            Derivative::Value => 0,
            Derivative::First => 1,
            Derivative::Second => 2,
        }
    }
}

/// Uniform cubic B-spline basis matrix `Ω`.
pub fn basis_matrix() -> Matrix4<f64> {
    Matrix4::new(
        1.0, -3.0, 3.0, -1.0, //
        4.0, 0.0, -6.0, 3.0, //
        1.0, 3.0, 3.0, -3.0, //
        0.0, 0.0, 0.0, 1.0,
    ) / 6.0
}

/// Cumulative basis matrix `Φ`.
pub fn cumulative_basis_matrix() -> Matrix4<f64> {
    Matrix4::new(
        6.0, 0.0, 0.0, 0.0, //
        5.0, 3.0, -3.0, 1.0, //
        1.0, 3.0, 3.0, -2.0, //
        0.0, 0.0, 0.0, 1.0,
    ) / 6.0
}

/// Uniform knot grid. Knot `i` sits at `t0 + i·τ`; the active segment is
/// `[knot(n-1), knot(n))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KnotGrid {
    pub t0: f64,
    pub tau: f64,
    pub n: i64,
}

impl KnotGrid {
    pub fn new(t0: f64, tau: f64, n: i64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() || !t0.is_finite() {
            return Err(Error::Config(format!("knot interval must be positive and finite, got {tau}")));
        }
        Ok(Self { t0, tau, n })
    }

    pub fn knot(&self, i: i64) -> f64 {
        self.t0 + i as f64 * self.tau
    }

    pub fn span_start(&self) -> f64 {
        self.knot(self.n - 1)
    }

    pub fn span_end(&self) -> f64 {
        self.knot(self.n)
    }

    /// Index of the segment containing `t`, for any `t`. Boundaries are the
    /// values returned by [`KnotGrid::knot`], so the division's rounding never
    /// disagrees with them.
    pub fn segment_index(&self, t: f64) -> i64 {
        let mut k = ((t - self.t0) / self.tau).floor() as i64;
        if t >= self.knot(k + 1) {
            k += 1;
        } else if t < self.knot(k) {
            k -= 1;
        }
        k
    }

    /// Segment index and normalized time for any `t`.
    pub fn locate(&self, t: f64) -> (i64, f64) {
        let k = self.segment_index(t);
        let u = ((t - self.knot(k)) / self.tau).clamp(0.0, 1.0);
        (k, u)
    }
}

/// Normalized time `u ∈ [0, 1)` of `t` within the active segment, and that
/// segment's index.
pub fn normalized_time(t: f64, grid: &KnotGrid) -> Result<(f64, i64)> {
    let k = grid.n - 1;
    let (start, end) = (grid.span_start(), grid.span_end());
    if !(t >= start && t < end) || grid.segment_index(t) != k {
        return Err(Error::OutOfSpan { t, start, end });
    }
    let (_, u) = grid.locate(t);
    Ok((u.min(1.0 - f64::EPSILON), k))
}

/// `u̲ = [1, u, u², u³]` or its first/second time derivative (with `1/τ`
/// scaling folded in).
pub fn time_powers(u: f64, tau: f64, order: Derivative) -> Vector4<f64> {
    match order {
        Derivative::Value => Vector4::new(1.0, u, u * u, u * u * u),
        Derivative::First => Vector4::new(0.0, 1.0, 2.0 * u, 3.0 * u * u) / tau,
        Derivative::Second => Vector4::new(0.0, 0.0, 2.0, 6.0 * u) / (tau * tau),
    }
}

/// Blending weights `Ω u̲∘` of the four position control points.
pub fn position_weights(u: f64, tau: f64, order: Derivative) -> Vector4<f64> {
    basis_matrix() * time_powers(u, tau, order)
}

/// Four consecutive position control points (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionSegment {
    pub points: [Vector3<f64>; 4],
}

impl PositionSegment {
    pub fn new(points: [Vector3<f64>; 4]) -> Self {
        Self { points }
    }

    /// Stacked `[s0; s1; s2; s3]`.
    pub fn stacked(&self) -> SMatrix<f64, 12, 1> {
        let mut v = SMatrix::<f64, 12, 1>::zeros();
        for (i, p) in self.points.iter().enumerate() {
            v.fixed_view_mut::<3, 1>(3 * i, 0).copy_from(p);
        }
        v
    }
}

pub fn position_eval(seg: &PositionSegment, u: f64, tau: f64, order: Derivative) -> Vector3<f64> {
    let w = position_weights(u, tau, order);
    seg.points.iter().zip(w.iter()).fold(Vector3::zeros(), |acc, (p, wi)| acc + p * *wi)
}

/// `Λ∘ = (Ω u̲∘)ᵀ ⊗ I₃`, so that `position_eval(seg, …) = Λ∘ · vec(seg)`.
pub fn position_kinematics_matrix(u: f64, tau: f64, order: Derivative) -> Matrix3x12 {
    let w = position_weights(u, tau, order);
    let mut m = Matrix3x12::zeros();
    for j in 0..4 {
        m.fixed_view_mut::<3, 3>(0, 3 * j).copy_from(&(Matrix3::identity() * w[j]));
    }
    m
}

/// Cumulative weights `λ = Φ u̲` (order 0) or `λ̇ = Φ u̲̇` (order 1, per second).
pub fn cumulative_lambdas(u: f64, tau: f64, order: Derivative) -> Result<Vector4<f64>> {
    match order {
        Derivative::Value | Derivative::First => Ok(cumulative_basis_matrix() * time_powers(u, tau, order)),
        Derivative::Second => Err(Error::InvalidOrder(order.order())),
    }
}

/// Base quaternion `r_{n-4}` and the four tangent increments `δ_{n-3..n}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientationSegment {
    pub base: UnitQuaternion,
    pub deltas: [RotVec; 4],
}

impl OrientationSegment {
    /// Validates that every increment lies inside the logarithm's principal domain.
    pub fn new(base: UnitQuaternion, deltas: [RotVec; 4]) -> Result<Self> {
        for (index, d) in deltas.iter().enumerate() {
            let norm = d.norm();
            if !(norm < std::f64::consts::PI) {
                return Err(Error::IncrementTooLarge { index, norm });
            }
        }
        Ok(Self { base, deltas })
    }

    /// Segment through four consecutive orientation control points; the
    /// first increment is zero so `r0` itself is the base.
    pub fn from_control_points(rot: [&UnitQuaternion; 4]) -> Self {
        let inc = |a: &UnitQuaternion, b: &UnitQuaternion| log_at_identity(&(a.inverse() * *b));
        Self {
            base: *rot[0],
            deltas: [Vector3::zeros(), inc(rot[0], rot[1]), inc(rot[1], rot[2]), inc(rot[2], rot[3])],
        }
    }
}

/// Everything the orientation queries share at one `(segment, u)`: weights,
/// the four factors `e_i = Exp(λ_i δ_i)` and their prefix/suffix products.
pub struct OrientationKinematics<'a> {
    seg: &'a OrientationSegment,
    lambda: Vector4<f64>,
    lambda_dot: Vector4<f64>,
    factors: [UnitQuaternion; 4],
    // prefix[i] = base • e_0 • … • e_{i-1}; prefix[4] is the full rotation.
    prefix: [Vector4<f64>; 5],
    // suffix[i] = e_{i+1} • … • e_3
    suffix: [Vector4<f64>; 4],
}

impl<'a> OrientationKinematics<'a> {
    pub fn new(seg: &'a OrientationSegment, u: f64, tau: f64) -> Self {
        let phi = cumulative_basis_matrix();
        let lambda = phi * time_powers(u, tau, Derivative::Value);
        let lambda_dot = phi * time_powers(u, tau, Derivative::First);
        let factors: [UnitQuaternion; 4] = std::array::from_fn(|i| exp_at_identity(&(seg.deltas[i] * lambda[i])));
        let mut prefix = [Vector4::zeros(); 5];
        prefix[0] = seg.base.as_vector4();
        for i in 0..4 {
            prefix[i + 1] = product4(&prefix[i], &factors[i].as_vector4());
        }
        let mut suffix = [Vector4::new(1.0, 0.0, 0.0, 0.0); 4];
        for i in (0..3).rev() {
            suffix[i] = product4(&factors[i + 1].as_vector4(), &suffix[i + 1]);
        }
        Self { seg, lambda, lambda_dot, factors, prefix, suffix }
    }

    pub fn rotation(&self) -> UnitQuaternion {
        UnitQuaternion::from_vector4(&self.prefix[4])
    }

    /// `∂r/∂[δ_0 … δ_3]` (4×12).
    pub fn jacobian(&self) -> Matrix4x12 {
        let mut jac = Matrix4x12::zeros();
        for i in 0..4 {
            let block: Matrix4x3<f64> = left_matrix4(&self.prefix[i])
                * right_matrix4(&self.suffix[i])
                * d_exp_d_nu(&(self.seg.deltas[i] * self.lambda[i]))
                * self.lambda[i];
            jac.fixed_view_mut::<4, 3>(0, 3 * i).copy_from(&block);
        }
        jac
    }

    fn recursion(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let d = &self.seg.deltas;
        let w1 = d[1] * self.lambda_dot[1];
        let w2 = self.factors[2].inverse_rotate(&w1) + d[2] * self.lambda_dot[2];
        let w = self.factors[3].inverse_rotate(&w2) + d[3] * self.lambda_dot[3];
        (w1, w2, w)
    }

    /// Body-frame angular velocity (rad/s).
    pub fn angular_velocity(&self) -> Vector3<f64> {
        self.recursion().2
    }

    // 𝒥_i(v) = λ_i ∂(e_i⁻¹•v•e_i)/∂e_i ∂e_i/∂(λ_iδ_i) + λ̇_i I
    fn conj_block(&self, i: usize, v: &Vector3<f64>) -> Matrix3<f64> {
        d_conjugation_d_q(&self.factors[i], v) * d_exp_d_nu(&(self.seg.deltas[i] * self.lambda[i])) * self.lambda[i]
            + Matrix3::identity() * self.lambda_dot[i]
    }

    /// `∂ω/∂[δ_0 … δ_3]` (3×12). The first block is identically zero.
    pub fn angvel_jacobian(&self) -> Matrix3x12 {
        let (w1, w2, _) = self.recursion();
        let rt3 = self.factors[3].to_rotmat().transpose();
        let rt2 = self.factors[2].to_rotmat().transpose();
        let mut jac = Matrix3x12::zeros();
        jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rt3 * rt2 * self.lambda_dot[1]));
        jac.fixed_view_mut::<3, 3>(0, 6).copy_from(&(rt3 * self.conj_block(2, &w1)));
        jac.fixed_view_mut::<3, 3>(0, 9).copy_from(&self.conj_block(3, &w2));
        jac
    }
}

pub fn orientation_eval(seg: &OrientationSegment, u: f64) -> UnitQuaternion {
    OrientationKinematics::new(seg, u, 1.0).rotation()
}

pub fn angular_velocity(seg: &OrientationSegment, u: f64, tau: f64) -> Vector3<f64> {
    OrientationKinematics::new(seg, u, tau).angular_velocity()
}

pub fn jac_orientation_wrt_deltas(seg: &OrientationSegment, u: f64) -> Matrix4x12 {
    OrientationKinematics::new(seg, u, 1.0).jacobian()
}

pub fn jac_angvel_wrt_deltas(seg: &OrientationSegment, u: f64, tau: f64) -> Matrix3x12 {
    OrientationKinematics::new(seg, u, tau).angvel_jacobian()
}

/// A full 6-DoF spline stored as explicit control points on a uniform grid.
///
/// Used for ground truth and for the estimator's finalized trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPointSpline {
    pub t0: f64,
    pub tau: f64,
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<UnitQuaternion>,
}

impl ControlPointSpline {
    pub fn new(t0: f64, tau: f64) -> Self {
        Self { t0, tau, positions: Vec::new(), rotations: Vec::new() }
    }

    pub fn push(&mut self, position: Vector3<f64>, rotation: UnitQuaternion) {
        self.positions.push(position);
        self.rotations.push(rotation);
    }

    pub fn num_segments(&self) -> usize {
        self.positions.len().min(self.rotations.len()).saturating_sub(3)
    }

    /// Closed time span `[start, end]` covered by complete segments.
    pub fn span(&self) -> Option<(f64, f64)> {
        match self.num_segments() {
            0 => None,
            n => Some((self.t0, self.t0 + n as f64 * self.tau)),
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.span().is_some_and(|(a, b)| t >= a && t <= b)
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (start, end) = self.span().ok_or(Error::OutOfSpan { t, start: self.t0, end: self.t0 })?;
        if !(t >= start && t <= end) {
            return Err(Error::OutOfSpan { t, start, end });
        }
        let grid = KnotGrid { t0: self.t0, tau: self.tau, n: 0 };
        let k = grid.segment_index(t).clamp(0, self.num_segments() as i64 - 1);
        let u = ((t - grid.knot(k)) / self.tau).clamp(0.0, 1.0);
        Ok((k as usize, u))
    }

    pub fn segments(&self, k: usize) -> (PositionSegment, OrientationSegment) {
        let pos = PositionSegment::new([
            self.positions[k],
            self.positions[k + 1],
            self.positions[k + 2],
            self.positions[k + 3],
        ]);
        let r = &self.rotations;
        let ori = OrientationSegment::from_control_points([&r[k], &r[k + 1], &r[k + 2], &r[k + 3]]);
        (pos, ori)
    }

    pub fn position(&self, t: f64, order: Derivative) -> Result<Vector3<f64>> {
        let (k, u) = self.locate(t)?;
        let (pos, _) = self.segments(k);
        Ok(position_eval(&pos, u, self.tau, order))
    }

    pub fn orientation(&self, t: f64) -> Result<UnitQuaternion> {
        let (k, u) = self.locate(t)?;
        let (_, ori) = self.segments(k);
        Ok(orientation_eval(&ori, u))
    }

    pub fn angular_velocity(&self, t: f64) -> Result<Vector3<f64>> {
        let (k, u) = self.locate(t)?;
        let (_, ori) = self.segments(k);
        Ok(angular_velocity(&ori, u, self.tau))
    }

    pub fn pose(&self, t: f64) -> Result<(Vector3<f64>, UnitQuaternion)> {
        let (k, u) = self.locate(t)?;
        let (pos, ori) = self.segments(k);
        Ok((position_eval(&pos, u, self.tau, Derivative::Value), orientation_eval(&ori, u)))
    }
}
