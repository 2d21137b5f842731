//! Run configuration, read from TOML with every key defaulted.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{InitialSigma, ProcessNoise, UpdateSettings};
use crate::eval::Alignment;
use crate::lidar::{AssociationConfig, Extrinsics};
use crate::simulator::SimConfig;
use crate::so3::UnitQuaternion;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// LiDAR only.
    #[default]
    LO,
    /// LiDAR-inertial.
    LIO,
    /// Multiple LiDARs.
    MLO,
    /// Multiple LiDARs with an IMU.
    MLIO,
}

impl Mode {
    pub fn uses_imu(self) -> bool {
        matches!(self, Mode::LIO | Mode::MLIO)
    }

    pub fn multi_lidar(self) -> bool {
        matches!(self, Mode::MLO | Mode::MLIO)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LO" => Ok(Mode::LO),
            "LIO" => Ok(Mode::LIO),
            "MLO" => Ok(Mode::MLO),
            "MLIO" => Ok(Mode::MLIO),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected LO, LIO, MLO or MLIO)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    /// Knots per second.
    pub knot_frequency: f64,
    /// Maximum time covered by one observation batch (s).
    pub batch_span: f64,
    /// Maximum raw measurements per batch.
    pub batch_max: usize,
    pub n_max: usize,
    pub eps: f64,
    /// LiDAR data before this offset from the first point seeds the map.
    pub bootstrap_duration: f64,
    /// Output poses per second; 0 samples each knot.
    pub output_rate: f64,
    /// Record the largest point-to-plane residual at each posterior.
    pub track_residuals: bool,
    /// Keep per-point gating decisions in the report.
    pub record_decisions: bool,
    pub align: Alignment,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: Mode::LO,
            knot_frequency: 100.0,
            batch_span: 0.01,
            batch_max: 10_000,
            n_max: 5,
            eps: 1e-3,
            bootstrap_duration: 0.1,
            output_rate: 0.0,
            track_residuals: false,
            record_decisions: false,
            align: Alignment::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub position: [f64; 3],
    /// `[w, x, y, z]`; when absent the orientation comes from gravity
    /// alignment (IMU modes) or is the identity.
    pub orientation: Option<[f64; 4]>,
    pub sigma_position: f64,
    pub sigma_delta: f64,
    pub sigma_bias_acc: f64,
    pub sigma_bias_gyro: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            orientation: None,
            sigma_position: 1e-3,
            sigma_delta: 1e-3,
            sigma_bias_acc: 0.05,
            sigma_bias_gyro: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessSection {
    pub sigma_position: f64,
    pub sigma_delta: f64,
    pub sigma_bias_acc: f64,
    pub sigma_bias_gyro: f64,
    pub random_walk_position: f64,
    pub random_walk_delta: f64,
}

impl Default for ProcessSection {
    fn default() -> Self {
        Self {
            sigma_position: 0.003,
            sigma_delta: 0.002,
            sigma_bias_acc: 1e-3,
            sigma_bias_gyro: 1e-4,
            random_walk_position: 0.0,
            random_walk_delta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarSection {
    pub leaf_size: f64,
    pub n_neighbors: usize,
    pub plane_rms_max: f64,
    pub assoc_dist_max: f64,
    /// Upper bound on the predicted residual variance `H P Hᵀ + R` (m²).
    pub outlier_threshold: f64,
    /// Chi-square bound on the normalized squared residual; 0 disables.
    pub innovation_gate: f64,
    /// Chi-square bound on `r² / R` re-checked at the posterior; points that
    /// fail are dropped and the update is redone from the same prior. 0 disables.
    pub posterior_gate: f64,
    pub posterior_passes: usize,
    pub reassociate: bool,
    pub min_range: f64,
    pub max_range: f64,
    /// Point-to-plane noise standard deviation (m).
    pub sigma: f64,
    pub map_cell: f64,
    pub map_min_spacing: f64,
}

impl Default for LidarSection {
    fn default() -> Self {
        Self {
            leaf_size: 0.25,
            n_neighbors: 5,
            plane_rms_max: 0.1,
            assoc_dist_max: 2.0,
            outlier_threshold: 0.05,
            innovation_gate: 9.0,
            posterior_gate: 9.0,
            posterior_passes: 2,
            reassociate: true,
            min_range: 0.5,
            max_range: 60.0,
            sigma: 0.05,
            map_cell: 0.5,
            map_min_spacing: 0.2,
        }
    }
}

impl LidarSection {
    pub fn association(&self) -> AssociationConfig {
        AssociationConfig {
            n_neighbors: self.n_neighbors,
            plane_rms_max: self.plane_rms_max,
            assoc_dist_max: self.assoc_dist_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuSection {
    pub sigma_acc: f64,
    pub sigma_gyro: f64,
    pub gravity_magnitude: f64,
    /// Initial quasi-static window used for gravity alignment (s).
    pub align_duration: f64,
}

impl Default for ImuSection {
    fn default() -> Self {
        Self { sigma_acc: 0.1, sigma_gyro: 0.01, gravity_magnitude: 9.81, align_duration: 0.5 }
    }
}

/// Sensor-to-body mounting of one LiDAR; the list index is the sensor id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSection {
    /// `[w, x, y, z]`
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl Default for SensorSection {
    fn default() -> Self {
        Self { rotation: [1.0, 0.0, 0.0, 0.0], translation: [0.0; 3] }
    }
}

impl SensorSection {
    pub fn from_extrinsics(e: &Extrinsics) -> Self {
        let q = e.rotation;
        Self { rotation: [q.w(), q.x(), q.y(), q.z()], translation: e.translation.into() }
    }

    pub fn extrinsics(&self) -> Result<Extrinsics> {
        let [w, x, y, z] = self.rotation;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("sensor rotation {:?} is not a unit quaternion", self.rotation)));
        }
        Ok(Extrinsics::new(UnitQuaternion::new(w, x, y, z), Vector3::from(self.translation)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub init: InitSection,
    pub process: ProcessSection,
    pub lidar: LidarSection,
    pub imu: ImuSection,
    pub sensors: Vec<SensorSection>,
    pub simulate: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            init: InitSection::default(),
            process: ProcessSection::default(),
            lidar: LidarSection::default(),
            imu: ImuSection::default(),
            sensors: vec![SensorSection::default()],
            simulate: SimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.run.knot_frequency
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let r = &self.run;
        if !(r.knot_frequency > 0.0 && r.knot_frequency.is_finite()) {
            return bad(format!("knot_frequency must be positive, got {}", r.knot_frequency));
        }
        if !(r.batch_span > 0.0) || r.batch_span > 4.0 / r.knot_frequency {
            return bad(format!("batch_span {} must be in (0, 4 knot intervals]", r.batch_span));
        }
        if r.batch_max == 0 || r.n_max == 0 {
            return bad("batch_max and n_max must be at least 1".into());
        }
        if !(r.eps > 0.0) || r.bootstrap_duration < 0.0 || r.output_rate < 0.0 {
            return bad("eps must be positive; bootstrap_duration and output_rate non-negative".into());
        }
        let l = &self.lidar;
        if !(l.leaf_size > 0.0 && l.map_cell > 0.0 && l.sigma > 0.0) || l.n_neighbors < 3 {
            return bad("leaf_size, map_cell and sigma must be positive; n_neighbors ≥ 3".into());
        }
        if !(l.innovation_gate >= 0.0 && l.posterior_gate >= 0.0) {
            return bad("gate thresholds must be non-negative".into());
        }
        if !(l.min_range >= 0.0 && l.max_range > l.min_range) {
            return bad(format!("invalid range limits [{}, {}]", l.min_range, l.max_range));
        }
        if !(self.imu.sigma_acc > 0.0 && self.imu.sigma_gyro > 0.0 && self.imu.gravity_magnitude > 0.0) {
            return bad("IMU noise and gravity magnitude must be positive".into());
        }
        let p = &self.process;
        if [p.sigma_position, p.sigma_delta, p.sigma_bias_acc, p.sigma_bias_gyro, p.random_walk_position, p.random_walk_delta]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("process noise must be non-negative".into());
        }
        let i = &self.init;
        if [i.sigma_position, i.sigma_delta, i.sigma_bias_acc, i.sigma_bias_gyro].iter().any(|v| !(*v > 0.0)) {
            return bad("initial standard deviations must be positive".into());
        }
        if let Some([w, x, y, z]) = i.orientation {
            if ((w * w + x * x + y * y + z * z).sqrt() - 1.0).abs() > 1e-6 {
                return bad("init.orientation is not a unit quaternion".into());
            }
        }
        if self.sensors.is_empty() {
            return bad("at least one sensor is required".into());
        }
        for s in &self.sensors {
            s.extrinsics()?;
        }
        Ok(())
    }

    pub fn extrinsics(&self) -> Result<Vec<Extrinsics>> {
        self.sensors.iter().map(SensorSection::extrinsics).collect()
    }

    pub fn process_noise(&self) -> ProcessNoise {
        let p = &self.process;
        ProcessNoise {
            position: p.sigma_position,
            delta: p.sigma_delta,
            bias_acc: p.sigma_bias_acc,
            bias_gyro: p.sigma_bias_gyro,
            random_walk_position: p.random_walk_position,
            random_walk_delta: p.random_walk_delta,
        }
    }

    pub fn initial_sigma(&self) -> InitialSigma {
        let i = &self.init;
        InitialSigma {
            position: i.sigma_position,
            delta: i.sigma_delta,
            bias_acc: i.sigma_bias_acc,
            bias_gyro: i.sigma_bias_gyro,
        }
    }

    pub fn update_settings(&self) -> UpdateSettings {
        UpdateSettings { n_max: self.run.n_max, eps: self.run.eps }
    }
}
