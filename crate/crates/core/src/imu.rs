//! Accelerometer and gyroscope measurement model.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::estimator::{Linearization, MeasurementModel, SplineState, BIAS_ACC, BIAS_GYRO, DELTA, POS};
use crate::so3::{d_conjugation_d_q, UnitQuaternion};
use crate::spline::{position_eval, position_kinematics_matrix, Derivative, OrientationKinematics};

const MAX_ACC: f64 = 200.0;
const MAX_GYRO: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Specific force in the body frame (m/s²).
    pub acc: Vector3<f64>,
    /// Body rate (rad/s).
    pub gyro: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, acc: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self { t, acc, gyro }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.t.is_finite() && self.acc.iter().chain(self.gyro.iter()).all(|v| v.is_finite());
        if !finite || self.acc.norm() >= MAX_ACC || self.gyro.norm() >= MAX_GYRO {
            return Err(Error::Input(format!("implausible IMU sample at t = {}", self.t)));
        }
        Ok(())
    }

    pub fn measurement(&self) -> Vector6<f64> {
        Vector6::new(self.acc.x, self.acc.y, self.acc.z, self.gyro.x, self.gyro.y, self.gyro.z)
    }
}

/// World-frame gravity reaction: a static accelerometer in a z-up world
/// reads `Rᵀ g` with `g = (0, 0, +9.81)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityVector(pub Vector3<f64>);

impl GravityVector {
    pub fn up(magnitude: f64) -> Self {
        Self(Vector3::new(0.0, 0.0, magnitude))
    }

    pub fn magnitude(&self) -> f64 {
        self.0.norm()
    }
}

impl Default for GravityVector {
    fn default() -> Self {
        Self::up(9.81)
    }
}

/// Predicted measurement `[Rᵀ(s̈ + g) + b_acc; ω + b_gyro]`.
pub fn imu_prediction(state: &SplineState, s: &ImuSample, g: &GravityVector) -> Result<Vector6<f64>> {
    let u = state.normalized_time(s.t)?;
    let tau = state.grid.tau;
    let seg = state.orientation_segment()?;
    let kin = OrientationKinematics::new(&seg, u, tau);
    let acc = position_eval(&state.position_segment(), u, tau, Derivative::Second);
    let f = kin.rotation().inverse_rotate(&(acc + g.0)) + state.b_acc();
    let w = kin.angular_velocity() + state.b_gyro();
    Ok(Vector6::new(f.x, f.y, f.z, w.x, w.y, w.z))
}

/// `∂h/∂x` of [`imu_prediction`] (6×dim). Bias columns exist only for 30-state
/// filters.
pub fn imu_jacobian(state: &SplineState, s: &ImuSample, g: &GravityVector) -> Result<DMatrix<f64>> {
    let u = state.normalized_time(s.t)?;
    let tau = state.grid.tau;
    let seg = state.orientation_segment()?;
    let kin = OrientationKinematics::new(&seg, u, tau);
    let r = kin.rotation();
    let acc = position_eval(&state.position_segment(), u, tau, Derivative::Second);
    let mut h = DMatrix::zeros(6, state.dim());
    let lam = position_kinematics_matrix(u, tau, Derivative::Second);
    h.view_mut((0, POS), (3, 12)).copy_from(&(r.to_rotmat().transpose() * lam));
    h.view_mut((0, DELTA), (3, 12)).copy_from(&(d_conjugation_d_q(&r, &(acc + g.0)) * kin.jacobian()));
    h.view_mut((3, DELTA), (3, 12)).copy_from(&kin.angvel_jacobian());
    if state.has_biases() {
        h.view_mut((0, BIAS_ACC), (3, 3)).copy_from(&Matrix3::identity());
        h.view_mut((3, BIAS_GYRO), (3, 3)).copy_from(&Matrix3::identity());
    }
    Ok(h)
}

pub struct ImuModel {
    pub sample: ImuSample,
    pub gravity: GravityVector,
    pub sigma_acc: f64,
    pub sigma_gyro: f64,
}

impl MeasurementModel for ImuModel {
    fn linearize(&self, state: &SplineState) -> Result<Option<Linearization>> {
        let h = imu_prediction(state, &self.sample, &self.gravity)?;
        let jac = imu_jacobian(state, &self.sample, &self.gravity)?;
        let mut noise = DMatrix::zeros(6, 6);
        for i in 0..3 {
            noise[(i, i)] = self.sigma_acc.powi(2);
            noise[(i + 3, i + 3)] = self.sigma_gyro.powi(2);
        }
        Ok(Some(Linearization {
            residual: DVector::from_column_slice((self.sample.measurement() - h).as_slice()),
            jacobian: jac,
            noise,
        }))
    }
}

/// Shortest rotation taking unit vector `a` onto unit vector `b`.
pub fn rotation_between(a: &Vector3<f64>, b: &Vector3<f64>) -> UnitQuaternion {
    let (a, b) = (a.normalize(), b.normalize());
    let c = a.dot(&b);
    if c < -1.0 + 1e-12 {
        // antiparallel: half turn about any axis orthogonal to a
        let axis = if a.x.abs() < 0.9 { a.cross(&Vector3::x()) } else { a.cross(&Vector3::y()) }.normalize();
        return UnitQuaternion::new(0.0, axis.x, axis.y, axis.z);
    }
    let v = a.cross(&b);
    UnitQuaternion::new(1.0 + c, v.x, v.y, v.z)
}

/// Body-to-world orientation (zero yaw) that makes the mean accelerometer
/// reading over the first `duration` seconds point along world up.
pub fn align_gravity(samples: &[ImuSample], duration: f64) -> Result<UnitQuaternion> {
    let t0 = samples.first().ok_or_else(|| Error::Input("no IMU samples for gravity alignment".into()))?.t;
    let window: Vec<&ImuSample> = samples.iter().take_while(|s| s.t < t0 + duration).collect();
    let mean = window.iter().map(|s| s.acc).sum::<Vector3<f64>>() / window.len() as f64;
    if mean.norm() < 1e-6 {
        return Err(Error::Input("mean specific force is zero; cannot find gravity".into()));
    }
    Ok(rotation_between(&mean, &Vector3::z()))
}
