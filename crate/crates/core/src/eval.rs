//! Trajectories, absolute position error and runtime statistics.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::so3::{exp_at_identity, log_at_identity, UnitQuaternion};
use crate::spline::ControlPointSpline;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub t: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion,
}

/// Timestamped poses with strictly increasing time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self> {
        for w in poses.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::Input(format!("trajectory time not strictly increasing at t = {}", w[1].t)));
            }
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.poses.first()?.t, self.poses.last()?.t))
    }

    /// Samples `spline` at `times`, skipping times outside its span.
    pub fn from_spline(spline: &ControlPointSpline, times: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut poses = Vec::new();
        for t in times {
            if !spline.contains(t) {
                continue;
            }
            let (position, orientation) = spline.pose(t)?;
            poses.push(Pose { t, position, orientation });
        }
        Self::new(poses)
    }

    /// Linear position and spherical-linear orientation interpolation.
    pub fn interpolate(&self, t: f64) -> Option<Pose> {
        let (start, end) = self.span()?;
        if t < start || t > end {
            return None;
        }
        let i = self.poses.partition_point(|p| p.t <= t);
        if i == self.poses.len() {
            return self.poses.last().copied();
        }
        let (a, b) = (&self.poses[i - 1], &self.poses[i]);
        let s = (t - a.t) / (b.t - a.t);
        let position = a.position + (b.position - a.position) * s;
        let rel = log_at_identity(&(a.orientation.inverse() * b.orientation));
        let orientation = a.orientation * exp_at_identity(&(rel * s));
        Some(Pose { t, position, orientation })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    #[default]
    None,
    Se3,
}

/// Rigid transform `(R, t)` minimizing `Σ ‖R xᵢ + t − yᵢ‖²`.
pub fn rigid_alignment(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        cov += (b - my) * (a - mx).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    (r, my - r * mx)
}

/// Position errors of `est` interpolated at the ground-truth timestamps that
/// fall inside its span.
pub fn position_errors(est: &Trajectory, gt: &Trajectory, align: Alignment) -> Result<Vec<f64>> {
    let mut e = Vec::new();
    let mut g = Vec::new();
    for p in gt.poses() {
        if let Some(q) = est.interpolate(p.t) {
            e.push(q.position);
            g.push(p.position);
        }
    }
    if e.is_empty() {
        return Err(Error::NoOverlap);
    }
    if align == Alignment::Se3 && e.len() >= 3 {
        let (r, t) = rigid_alignment(&e, &g);
        for p in e.iter_mut() {
            *p = r * *p + t;
        }
    }
    Ok(e.iter().zip(&g).map(|(a, b)| (a - b).norm()).collect())
}

/// RMSE of the absolute position error.
pub fn evaluate_ape(est: &Trajectory, gt: &Trajectory, align: Alignment) -> Result<f64> {
    let errs = position_errors(est, gt, align)?;
    Ok((errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RuntimeStats {
    /// Mean processing time over the available time per batch.
    pub xi: f64,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

pub fn report_runtime(per_batch_times: &[f64], batch_span: f64) -> Result<RuntimeStats> {
    if per_batch_times.is_empty() {
        return Err(Error::EmptyTimings);
    }
    if !(batch_span > 0.0) {
        return Err(Error::Config(format!("batch span must be positive, got {batch_span}")));
    }
    let mut sorted = per_batch_times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(RuntimeStats {
        xi: mean / batch_span,
        mean,
        p50: percentile(&sorted, 0.5),
        p95: percentile(&sorted, 0.95),
        max: *sorted.last().unwrap(),
    })
}
