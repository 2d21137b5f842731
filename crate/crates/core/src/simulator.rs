//! Deterministic synthetic data: smooth ground-truth motion, a planar world,
//! LiDAR raycasting with exact per-point timestamps and IMU synthesis.
//!
//! Evaluation goes through [`ControlPointSpline`] only; nothing here touches
//! the estimator's measurement models.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::eval::Trajectory;
use crate::imu::ImuSample;
use crate::lidar::{Extrinsics, LidarPoint};
use crate::so3::{exp_at_identity, UnitQuaternion};
use crate::spline::{ControlPointSpline, Derivative};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    #[default]
    Low,
    High,
}

impl Dynamics {
    /// Target peak linear speed (m/s) and angular rate (rad/s).
    fn targets(self) -> (f64, f64) {
        match self {
            Dynamics::Low => (0.9, 0.45),
            Dynamics::High => (4.0, 4.0),
        }
    }

    fn frequencies(self) -> (f64, f64) {
        match self {
            Dynamics::Low => (0.05, 0.3),
            Dynamics::High => (0.25, 1.2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthOptions {
    pub knot_frequency: f64,
    pub start_time: f64,
    /// The trajectory is exactly at rest for this long, then ramps in.
    pub static_duration: f64,
    pub ramp_duration: f64,
    pub origin: Vector3<f64>,
    pub orientation: UnitQuaternion,
}

impl Default for TruthOptions {
    fn default() -> Self {
        Self {
            knot_frequency: 50.0,
            start_time: 0.0,
            static_duration: 0.5,
            ramp_duration: 1.0,
            origin: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthSpline {
    pub spline: ControlPointSpline,
    pub seed: u64,
}

impl TruthSpline {
    pub fn span(&self) -> (f64, f64) {
        self.spline.span().expect("truth spline has at least one segment")
    }

    pub fn pose(&self, t: f64) -> (Vector3<f64>, UnitQuaternion) {
        self.spline.pose(t).expect("time inside truth span")
    }

    /// Ground-truth trajectory sampled at `rate` Hz.
    pub fn trajectory(&self, rate: f64) -> Trajectory {
        let (start, end) = self.span();
        let n = ((end - start) * rate).floor() as usize;
        let times = (0..=n).map(|i| start + i as f64 / rate).filter(|t| *t < end);
        Trajectory::from_spline(&self.spline, times).expect("sampled inside span")
    }
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

#[derive(Clone, Debug)]
struct Motion {
    pos: [Vec<Wave>; 3],
    rot: [Vec<Wave>; 3],
}

fn smootherstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

impl Motion {
    fn random(rng: &mut ChaCha8Rng, dynamics: Dynamics) -> Self {
        let (fmin, fmax) = dynamics.frequencies();
        let mut waves = |weights: [f64; 3]| -> [Vec<Wave>; 3] {
            std::array::from_fn(|axis| {
                (0..3)
                    .map(|_| Wave {
                        amp: weights[axis] * rng.random_range(0.5..1.0),
                        freq: rng.random_range(fmin..fmax),
                        phase: rng.random_range(0.0..2.0 * PI),
                    })
                    .collect()
            })
        };
        // less vertical travel and less roll/pitch than yaw
        let pos = waves([1.0, 1.0, 0.3]);
        let rot = waves([0.5, 0.5, 1.0]);
        Self { pos, rot }
    }

    fn sum(waves: &[Wave], t: f64, scale: f64) -> f64 {
        waves.iter().map(|w| scale * w.amp * (2.0 * PI * w.freq * t + w.phase).sin()).sum()
    }

    fn eval(&self, t: f64, envelope: f64, pos_scale: f64, rot_scale: f64) -> (Vector3<f64>, Vector3<f64>) {
        let p = Vector3::from_fn(|i, _| Self::sum(&self.pos[i], t, pos_scale));
        let r = Vector3::from_fn(|i, _| Self::sum(&self.rot[i], t, rot_scale));
        (p * envelope, r * envelope)
    }
}

fn build_truth(
    motion: &Motion,
    duration: f64,
    opts: &TruthOptions,
    pos_scale: f64,
    rot_scale: f64,
) -> ControlPointSpline {
    let tau = 1.0 / opts.knot_frequency;
    let mut spline = ControlPointSpline::new(opts.start_time, tau);
    let segments = (duration / tau).ceil() as usize + 1;
    let t_move = opts.start_time + opts.static_duration;
    for i in 0..segments + 3 {
        // control point i is centered on knot i − 1
        let t = opts.start_time + (i as f64 - 1.0) * tau;
        let env = smootherstep((t - t_move) / opts.ramp_duration);
        let (p, r) = motion.eval(t - t_move, env, pos_scale, rot_scale);
        spline.push(opts.origin + p, opts.orientation * exp_at_identity(&r));
    }
    spline
}

/// Peak linear speed and body angular rate, sampled at 1 kHz.
pub fn peak_rates(spline: &ControlPointSpline) -> (f64, f64) {
    let (start, end) = spline.span().expect("non-empty spline");
    let n = ((end - start) * 1000.0) as usize;
    let mut v = 0.0f64;
    let mut w = 0.0f64;
    for i in 0..n {
        let t = start + i as f64 * 1e-3;
        v = v.max(spline.position(t, Derivative::First).unwrap().norm());
        w = w.max(spline.angular_velocity(t).unwrap().norm());
    }
    (v, w)
}

pub fn gen_truth(seed: u64, duration: f64, dynamics: Dynamics) -> TruthSpline {
    gen_truth_with(seed, duration, dynamics, &TruthOptions::default())
}

/// Random smooth 6-DoF motion, at rest for `static_duration`, with peak
/// speed and angular rate rescaled to the dynamics class.
pub fn gen_truth_with(seed: u64, duration: f64, dynamics: Dynamics, opts: &TruthOptions) -> TruthSpline {
    assert!(duration > 0.0, "duration must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = Motion::random(&mut rng, dynamics);
    let (v_target, w_target) = dynamics.targets();
    let (mut ps, mut rs) = (1.0, 1.0);
    let mut spline = build_truth(&motion, duration, opts, ps, rs);
    if duration > opts.static_duration {
        for _ in 0..6 {
            let (v, w) = peak_rates(&spline);
            if v > 0.0 {
                ps *= v_target / v;
            }
            if w > 0.0 {
                rs *= w_target / w;
            }
            spline = build_truth(&motion, duration, opts, ps, rs);
            if (v - v_target).abs() < 1e-3 * v_target && (w - w_target).abs() < 1e-3 * w_target {
                break;
            }
        }
    }
    TruthSpline { spline, seed }
}

/// Bounded planar rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub axes: [Vector3<f64>; 2],
    pub half_extents: [f64; 2],
}

impl Patch {
    /// `hint` is projected onto the plane to define the first in-plane axis.
    pub fn new(center: Vector3<f64>, normal: Vector3<f64>, hint: Vector3<f64>, half_extents: [f64; 2]) -> Self {
        let normal = normal.normalize();
        let a = (hint - normal * normal.dot(&hint)).normalize();
        let b = normal.cross(&a);
        assert!(half_extents[0] > 0.0 && half_extents[1] > 0.0, "degenerate patch");
        Self { center, normal, axes: [a, b], half_extents }
    }

    pub fn infinite(point: Vector3<f64>, normal: Vector3<f64>) -> Self {
        let hint = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        Self::new(point, normal, hint, [f64::INFINITY, f64::INFINITY])
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.center))
    }

    /// Ray parameter of the hit, if the ray meets the bounded patch ahead.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.center - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let d = origin + dir * t - self.center;
        (d.dot(&self.axes[0]).abs() <= self.half_extents[0] && d.dot(&self.axes[1]).abs() <= self.half_extents[1])
            .then_some(t)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlaneWorld {
    pub patches: Vec<Patch>,
}

impl PlaneWorld {
    pub fn new(patches: Vec<Patch>) -> Self {
        Self { patches }
    }

    /// Nearest hit along the ray: (range, patch index).
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        self.patches
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Closed 30 × 30 × 8 m hall around the origin with boxes, slanted panels
    /// and pillars, all kept clear of the central 12 × 12 m motion area.
    pub fn hall(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
        let mut patches = Vec::new();
        let (hx, hy, floor, ceil) = (15.0, 15.0, -3.0, 5.0);
        let zc = (floor + ceil) / 2.0;
        let hz = (ceil - floor) / 2.0;
        patches.push(Patch::new(Vector3::new(0.0, 0.0, floor), Vector3::z(), Vector3::x(), [hx, hy]));
        patches.push(Patch::new(Vector3::new(0.0, 0.0, ceil), -Vector3::z(), Vector3::x(), [hx, hy]));
        patches.push(Patch::new(Vector3::new(hx, 0.0, zc), -Vector3::x(), Vector3::y(), [hy, hz]));
        patches.push(Patch::new(Vector3::new(-hx, 0.0, zc), Vector3::x(), Vector3::y(), [hy, hz]));
        patches.push(Patch::new(Vector3::new(0.0, hy, zc), -Vector3::y(), Vector3::x(), [hx, hz]));
        patches.push(Patch::new(Vector3::new(0.0, -hy, zc), Vector3::y(), Vector3::x(), [hx, hz]));
        // boxes resting on the floor
        for k in 0..8 {
            let ang = 2.0 * PI * (k as f64 + rng.random_range(0.0..0.6)) / 8.0;
            let rad = rng.random_range(8.0..11.5);
            let c = Vector3::new(rad * ang.cos(), rad * ang.sin(), 0.0);
            let half = Vector3::new(rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..2.0));
            let yaw = rng.random_range(0.0..PI);
            let ex = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
            let ey = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
            let center = Vector3::new(c.x, c.y, floor + half.z);
            for (n, a, h) in [
                (ex, ey, [half.y, half.z]),
                (-ex, ey, [half.y, half.z]),
                (ey, ex, [half.x, half.z]),
                (-ey, ex, [half.x, half.z]),
            ] {
                let offset = if n.dot(&ex).abs() > 0.5 { half.x } else { half.y };
                patches.push(Patch::new(center + n * offset, n, a, h));
            }
            patches.push(Patch::new(center + Vector3::z() * half.z, Vector3::z(), ex, [half.x, half.y]));
        }
        // slanted panels leaning against the walls
        for k in 0..4 {
            let ang: f64 = PI / 4.0 + k as f64 * PI / 2.0;
            let dir = Vector3::new(ang.cos(), ang.sin(), 0.0);
            let tilt: f64 = rng.random_range(0.3..0.7);
            let normal = (-dir * tilt.cos() + Vector3::z() * tilt.sin()).normalize();
            let center = dir * 13.0 + Vector3::z() * rng.random_range(0.0..2.0);
            patches.push(Patch::new(center, normal, Vector3::z().cross(&dir), [2.0, 1.5]));
        }
        // square pillars
        for (x, y) in [(7.0, 0.5), (-7.0, -0.5), (0.5, 7.0), (-0.5, -7.0)] {
            let c = Vector3::new(x, y, zc);
            for n in [Vector3::x(), -Vector3::x(), Vector3::y(), -Vector3::y()] {
                patches.push(Patch::new(c + n * 0.3, n, Vector3::z(), [hz, 0.3]));
            }
        }
        Self { patches }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKind {
    /// 32 rings, 10 Hz revolution.
    Spinning,
    /// Non-repetitive forward-looking rosette.
    Livox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPattern {
    pub kind: ScanKind,
    /// Points per second.
    pub rate: f64,
}

const RINGS: usize = 32;
const REVOLUTION_HZ: f64 = 10.0;
const ELEVATION: (f64, f64) = (-30.0 * PI / 180.0, 30.0 * PI / 180.0);
const LIVOX_HALF_FOV: f64 = 38.0 * PI / 180.0;

impl ScanPattern {
    pub fn spinning(rate: f64) -> Self {
        Self { kind: ScanKind::Spinning, rate }
    }

    pub fn livox(rate: f64) -> Self {
        Self { kind: ScanKind::Livox, rate }
    }

    /// Unit sensor-frame direction of ray `i`.
    pub fn direction(&self, i: u64) -> Vector3<f64> {
        match self.kind {
            ScanKind::Spinning => {
                let ring = (i % RINGS as u64) as f64;
                let column = (i / RINGS as u64) as f64;
                let cols_per_rev = (self.rate / REVOLUTION_HZ / RINGS as f64).max(1.0);
                let az = 2.0 * PI * column / cols_per_rev;
                let el = ELEVATION.0 + (ELEVATION.1 - ELEVATION.0) * ring / (RINGS - 1) as f64;
                Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
            }
            ScanKind::Livox => {
                // low-discrepancy disc sampling of the forward cone
                let a = (i as f64 * 0.618_033_988_749_894_9).fract();
                let b = (i as f64 * 0.754_877_666_246_692_7).fract();
                let off = LIVOX_HALF_FOV * a.sqrt();
                let phi = 2.0 * PI * b;
                Vector3::new(off.cos(), off.sin() * phi.cos(), off.sin() * phi.sin())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaycastOptions {
    pub sigma: f64,
    pub outlier_fraction: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub sensor_id: usize,
    pub extrinsics: Extrinsics,
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for RaycastOptions {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            outlier_fraction: 0.0,
            min_range: 0.5,
            max_range: 60.0,
            sensor_id: 0,
            extrinsics: Extrinsics::identity(),
            t_start: f64::NEG_INFINITY,
            t_end: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaycastOutput {
    pub points: Vec<LidarPoint>,
    /// True for injected gross outliers.
    pub outlier: Vec<bool>,
    /// Source patch of each point.
    pub patch: Vec<usize>,
    /// Rays cast, including misses.
    pub rays: usize,
}

/// Casts each ray from the truth pose at its own timestamp. Gross outliers
/// get a ±U(1, 3) m range offset.
pub fn raycast(
    world: &PlaneWorld,
    truth: &TruthSpline,
    pattern: &ScanPattern,
    opts: &RaycastOptions,
    seed: u64,
) -> RaycastOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + opts.sensor_id as u64);
    let noise = Normal::new(0.0, opts.sigma.max(0.0)).expect("finite sigma");
    let (start, end) = truth.span();
    let start = start.max(opts.t_start);
    let end = end.min(opts.t_end);
    let mut out = RaycastOutput::default();
    let dt = 1.0 / pattern.rate;
    let mut i: u64 = 0;
    loop {
        let t = start + i as f64 * dt;
        if t >= end {
            break;
        }
        let dir_l = pattern.direction(i);
        i += 1;
        out.rays += 1;
        let (s, r) = truth.pose(t);
        let origin = r.rotate(&opts.extrinsics.translation) + s;
        let dir = r.rotate(&opts.extrinsics.rotation.rotate(&dir_l));
        // draw every random number unconditionally so streams stay aligned
        let eps = noise.sample(&mut rng);
        let is_outlier = rng.random::<f64>() < opts.outlier_fraction;
        let magnitude = rng.random_range(1.0..3.0);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let Some((range, patch)) = world.intersect(&origin, &dir) else {
            continue;
        };
        let mut measured = range + if opts.sigma > 0.0 { eps } else { 0.0 };
        if is_outlier {
            measured += sign * magnitude;
            if measured < opts.min_range {
                measured = range + magnitude;
            }
        }
        if measured < opts.min_range || measured > opts.max_range {
            continue;
        }
        out.points.push(LidarPoint::new(t, dir_l * measured, opts.sensor_id));
        out.outlier.push(is_outlier);
        out.patch.push(patch);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuOptions {
    pub rate: f64,
    pub b_acc: Vector3<f64>,
    pub b_gyro: Vector3<f64>,
    pub sigma_acc: f64,
    pub sigma_gyro: f64,
    pub gravity: Vector3<f64>,
}

impl Default for ImuOptions {
    fn default() -> Self {
        Self {
            rate: 200.0,
            b_acc: Vector3::zeros(),
            b_gyro: Vector3::zeros(),
            sigma_acc: 0.0,
            sigma_gyro: 0.0,
            gravity: Vector3::new(0.0, 0.0, 9.81),
        }
    }
}

/// `acc = Rᵀ(s̈ + g) + b_acc + n`, `gyro = ω + b_gyro + n` on the truth spline.
pub fn synth_imu(truth: &TruthSpline, opts: &ImuOptions, seed: u64) -> Vec<ImuSample> {
    assert!(opts.rate > 0.0, "IMU rate must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100);
    let na = Normal::new(0.0, opts.sigma_acc.max(0.0)).expect("finite sigma");
    let ng = Normal::new(0.0, opts.sigma_gyro.max(0.0)).expect("finite sigma");
    let (start, end) = truth.span();
    let mut out = Vec::new();
    let mut i = 0u64;
    loop {
        let t = start + i as f64 / opts.rate;
        if t >= end {
            break;
        }
        i += 1;
        let acc = truth.spline.position(t, Derivative::Second).unwrap();
        let r = truth.spline.orientation(t).unwrap();
        let w = truth.spline.angular_velocity(t).unwrap();
        let mut f = r.inverse_rotate(&(acc + opts.gravity)) + opts.b_acc;
        let mut g = w + opts.b_gyro;
        for k in 0..3 {
            f[k] += na.sample(&mut rng);
            g[k] += ng.sample(&mut rng);
        }
        out.push(ImuSample::new(t, f, g));
    }
    out
}

/// Everything needed to configure one synthetic sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub duration: f64,
    pub dynamics: Dynamics,
    pub truth_knot_frequency: f64,
    pub static_duration: f64,
    pub pattern: ScanKind,
    pub point_rate: f64,
    pub lidar_sigma: f64,
    pub outlier_fraction: f64,
    /// Number of LiDARs; the second one is a rosette scanner.
    pub lidars: usize,
    pub imu_rate: f64,
    pub sigma_acc: f64,
    pub sigma_gyro: f64,
    pub b_acc: [f64; 3],
    pub b_gyro: [f64; 3],
    pub gravity: f64,
    pub gt_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration: 30.0,
            dynamics: Dynamics::Low,
            truth_knot_frequency: 50.0,
            static_duration: 0.5,
            pattern: ScanKind::Spinning,
            point_rate: 20_000.0,
            lidar_sigma: 0.02,
            outlier_fraction: 0.0,
            lidars: 1,
            imu_rate: 200.0,
            sigma_acc: 0.05,
            sigma_gyro: 0.005,
            b_acc: [0.0; 3],
            b_gyro: [0.0; 3],
            gravity: 9.81,
            gt_rate: 100.0,
        }
    }
}

/// Mounting of the simulated LiDARs (sensor → body).
pub fn default_extrinsics(count: usize) -> Vec<Extrinsics> {
    let second = Extrinsics::new(
        exp_at_identity(&Vector3::new(0.0, 0.35, 0.0)) * exp_at_identity(&Vector3::new(0.0, 0.0, 2.4)),
        Vector3::new(-0.15, 0.1, 0.05),
    );
    let first = Extrinsics::new(exp_at_identity(&Vector3::new(0.0, 0.0, 0.1)), Vector3::new(0.05, 0.0, 0.1));
    [first, second].into_iter().cycle().take(count).collect()
}

#[derive(Clone, Debug)]
pub struct SimData {
    pub truth: TruthSpline,
    pub world: PlaneWorld,
    pub lidar: Vec<LidarPoint>,
    pub outlier: Vec<bool>,
    pub imu: Vec<ImuSample>,
    pub extrinsics: Vec<Extrinsics>,
    pub ground_truth: Trajectory,
}

pub fn simulate(cfg: &SimConfig) -> SimData {
    let opts = TruthOptions {
        knot_frequency: cfg.truth_knot_frequency,
        static_duration: cfg.static_duration,
        ..TruthOptions::default()
    };
    let truth = gen_truth_with(cfg.seed, cfg.duration, cfg.dynamics, &opts);
    let world = PlaneWorld::hall(cfg.seed);
    let extrinsics = default_extrinsics(cfg.lidars.max(1));
    let mut lidar = Vec::new();
    let mut outlier = Vec::new();
    let t_end = opts.start_time + cfg.duration;
    for (id, ext) in extrinsics.iter().enumerate() {
        let kind = if id == 0 { cfg.pattern } else { ScanKind::Livox };
        let pattern = ScanPattern { kind, rate: cfg.point_rate };
        let ray_opts = RaycastOptions {
            sigma: cfg.lidar_sigma,
            outlier_fraction: cfg.outlier_fraction,
            sensor_id: id,
            extrinsics: *ext,
            t_end,
            ..RaycastOptions::default()
        };
        let out = raycast(&world, &truth, &pattern, &ray_opts, cfg.seed);
        lidar.extend(out.points);
        outlier.extend(out.outlier);
    }
    // stable merge by time keeps labels aligned
    let mut order: Vec<usize> = (0..lidar.len()).collect();
    order.sort_by(|&a, &b| lidar[a].t.total_cmp(&lidar[b].t).then(a.cmp(&b)));
    let lidar: Vec<LidarPoint> = order.iter().map(|&i| lidar[i]).collect();
    let outlier: Vec<bool> = order.iter().map(|&i| outlier[i]).collect();
    let imu_opts = ImuOptions {
        rate: cfg.imu_rate,
        b_acc: Vector3::from(cfg.b_acc),
        b_gyro: Vector3::from(cfg.b_gyro),
        sigma_acc: cfg.sigma_acc,
        sigma_gyro: cfg.sigma_gyro,
        gravity: Vector3::new(0.0, 0.0, cfg.gravity),
    };
    let imu: Vec<ImuSample> = synth_imu(&truth, &imu_opts, cfg.seed).into_iter().filter(|s| s.t < t_end).collect();
    let gt = truth.trajectory(cfg.gt_rate);
    let ground_truth = Trajectory::new(gt.poses().iter().copied().filter(|p| p.t < t_end).collect()).unwrap();
    SimData { truth, world, lidar, outlier, imu, extrinsics, ground_truth }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn truth_is_deterministic() {
        let a = gen_truth(7, 3.0, Dynamics::High);
        let b = gen_truth(7, 3.0, Dynamics::High);
        assert_eq!(a, b);
        assert_ne!(a, gen_truth(8, 3.0, Dynamics::High));
    }

    #[test]
    fn dynamics_bounds() {
        let low = gen_truth(3, 10.0, Dynamics::Low);
        let (v, w) = peak_rates(&low.spline);
        assert!(v <= 1.0 && w <= 0.5, "low: {v} {w}");
        let high = gen_truth(3, 10.0, Dynamics::High);
        let (v, w) = peak_rates(&high.spline);
        assert!(v >= 3.0 && w >= 3.0, "high: {v} {w}");
    }

    #[test]
    fn starts_at_rest() {
        let truth = gen_truth(4, 3.0, Dynamics::High);
        let (p0, q0) = truth.pose(0.0);
        for t in [0.1, 0.2, 0.4] {
            let (p, q) = truth.pose(t);
            assert_eq!(p, p0);
            assert_relative_eq!(q.as_vector4(), q0.as_vector4(), epsilon = 1e-15);
        }
    }

    #[test]
    fn downward_ray_hits_floor() {
        let world = PlaneWorld::new(vec![Patch::infinite(Vector3::new(0.0, 0.0, -1.0), Vector3::z())]);
        let (range, idx) = world.intersect(&Vector3::zeros(), &-Vector3::z()).unwrap();
        assert_eq!((range, idx), (1.0, 0));
        assert!(world.intersect(&Vector3::zeros(), &Vector3::z()).is_none());
    }

    #[test]
    fn exact_points_lie_on_source_patches() {
        let truth = gen_truth(5, 1.0, Dynamics::High);
        let world = PlaneWorld::hall(5);
        let out = raycast(&world, &truth, &ScanPattern::spinning(20_000.0), &RaycastOptions::default(), 5);
        assert!(!out.points.is_empty());
        for (p, &patch) in out.points.iter().zip(&out.patch) {
            let (s, r) = truth.pose(p.t);
            let w = r.rotate(&p.p) + s;
            assert!(world.patches[patch].signed_distance(&w).abs() < 1e-9);
        }
        for w in out.points.windows(2) {
            assert!(w[1].t > w[0].t);
        }
    }

    #[test]
    fn pattern_rays_are_unit() {
        for pattern in [ScanPattern::spinning(20_000.0), ScanPattern::livox(20_000.0)] {
            for i in 0..5000 {
                assert_relative_eq!(pattern.direction(i).norm(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn static_imu() {
        let mut truth = gen_truth(6, 0.4, Dynamics::Low);
        truth.spline.rotations.iter_mut().for_each(|r| *r = exp_at_identity(&Vector3::new(0.2, 0.1, 0.5)));
        let samples = synth_imu(&truth, &ImuOptions::default(), 6);
        let g = Vector3::new(0.0, 0.0, 9.81);
        let expected = exp_at_identity(&Vector3::new(0.2, 0.1, 0.5)).inverse_rotate(&g);
        for s in &samples {
            assert!((s.acc - expected).amax() < 1e-12);
            assert!(s.gyro.amax() < 1e-12);
        }
    }

    #[test]
    fn outliers_are_labeled() {
        let truth = gen_truth(9, 1.0, Dynamics::Low);
        let world = PlaneWorld::hall(9);
        let opts = RaycastOptions { outlier_fraction: 0.05, ..RaycastOptions::default() };
        let out = raycast(&world, &truth, &ScanPattern::spinning(20_000.0), &opts, 9);
        let frac = out.outlier.iter().filter(|o| **o).count() as f64 / out.points.len() as f64;
        assert!((frac - 0.05).abs() < 0.01, "{frac}");
        for ((p, &o), &patch) in out.points.iter().zip(&out.outlier).zip(&out.patch) {
            let (s, r) = truth.pose(p.t);
            let d = world.patches[patch].signed_distance(&(r.rotate(&p.p) + s));
            // the offset is along the ray, so the plane distance shrinks by the incidence angle
            assert_eq!(o, d.abs() > 1e-6);
        }
    }
}
