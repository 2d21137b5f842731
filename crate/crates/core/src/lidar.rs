//! Direct LiDAR odometry pieces: downsampling, batching, the incremental
//! local map, plane association, the point-to-plane model and gating.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::estimator::{Linearization, MeasurementModel, SplineState, DELTA, POS};
use crate::imu::ImuSample;
use crate::so3::{d_rotation_d_q, UnitQuaternion};
use crate::spline::{position_eval, position_kinematics_matrix, ControlPointSpline, Derivative, KnotGrid, OrientationKinematics};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    /// Exact acquisition time (s).
    pub t: f64,
    /// Sensor-frame coordinates (m).
    pub p: Vector3<f64>,
    pub sensor_id: usize,
}

impl LidarPoint {
    pub fn new(t: f64, p: Vector3<f64>, sensor_id: usize) -> Self {
        Self { t, p, sensor_id }
    }

    pub fn is_valid(&self, min_range: f64, max_range: f64) -> bool {
        let r = self.p.norm();
        self.t.is_finite() && self.p.iter().all(|v| v.is_finite()) && r >= min_range && r <= max_range
    }
}

/// Sensor-to-body transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics {
    pub rotation: UnitQuaternion,
    pub translation: Vector3<f64>,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self::identity()
    }
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn to_body(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
}

/// Keeps one point per voxel: the one closest to the voxel's centroid.
/// Voxels are keyed per sensor since points are in sensor coordinates.
pub fn voxel_downsample(points: &[LidarPoint], leaf: f64) -> Vec<LidarPoint> {
    assert!(leaf > 0.0, "leaf size must be positive");
    let key = |p: &LidarPoint| {
        (p.sensor_id, [(p.p.x / leaf).floor() as i64, (p.p.y / leaf).floor() as i64, (p.p.z / leaf).floor() as i64])
    };
    let mut voxels: HashMap<(usize, [i64; 3]), (Vector3<f64>, Vec<usize>)> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let e = voxels.entry(key(p)).or_insert_with(|| (Vector3::zeros(), Vec::new()));
        e.0 += p.p;
        e.1.push(i);
    }
    let mut keep: Vec<usize> = voxels
        .into_values()
        .map(|(sum, members)| {
            let c = sum / members.len() as f64;
            let mut best = members[0];
            let mut best_d = (points[best].p - c).norm_squared();
            for &i in &members[1..] {
                let d = (points[i].p - c).norm_squared();
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    keep.sort_by(|&a, &b| points[a].t.total_cmp(&points[b].t).then(a.cmp(&b)));
    keep.into_iter().map(|i| points[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Observation {
    Lidar(LidarPoint),
    Imu(ImuSample),
}

impl Observation {
    pub fn t(&self) -> f64 {
        match self {
            Observation::Lidar(p) => p.t,
            Observation::Imu(s) => s.t,
        }
    }
}

/// Timestamp-sorted measurements processed by one iterated update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationBatch {
    pub items: Vec<Observation>,
}

impl ObservationBatch {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn first_t(&self) -> Option<f64> {
        self.items.first().map(Observation::t)
    }

    pub fn last_t(&self) -> Option<f64> {
        self.items.last().map(Observation::t)
    }

    pub fn lidar(&self) -> impl Iterator<Item = &LidarPoint> {
        self.items.iter().filter_map(|o| match o {
            Observation::Lidar(p) => Some(p),
            _ => None,
        })
    }

    pub fn imu(&self) -> impl Iterator<Item = &ImuSample> {
        self.items.iter().filter_map(|o| match o {
            Observation::Imu(s) => Some(s),
            _ => None,
        })
    }
}

/// Merges streams into one timestamp-sorted queue. Ties keep LiDAR before IMU
/// and otherwise preserve input order.
pub fn merge_streams(lidar: &[LidarPoint], imu: &[ImuSample]) -> VecDeque<Observation> {
    let mut all: Vec<Observation> = lidar
        .iter()
        .map(|p| Observation::Lidar(*p))
        .chain(imu.iter().map(|s| Observation::Imu(*s)))
        .collect();
    all.sort_by(|a, b| a.t().total_cmp(&b.t()));
    all.into()
}

/// Pops the next batch off the queue.
///
/// A batch spans at most `span_limit` seconds, holds at most `max_count`
/// items and never crosses a knot of `grid`: every item falls in the same knot
/// interval as the first one, so a batch is always processed against a single
/// active segment.
pub fn assemble_batch(
    queue: &mut VecDeque<Observation>,
    max_count: usize,
    span_limit: f64,
    grid: &KnotGrid,
) -> ObservationBatch {
    let mut batch = ObservationBatch::default();
    let Some(first) = queue.front().map(Observation::t) else {
        return batch;
    };
    let boundary = grid.knot(grid.segment_index(first) + 1);
    while let Some(next) = queue.front() {
        let t = next.t();
        if batch.items.len() >= max_count.max(1) || t - first > span_limit || t >= boundary {
            break;
        }
        batch.items.push(queue.pop_front().unwrap());
    }
    batch
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

/// Incremental voxel-hashed point index with exact k-nearest-neighbor
/// queries. Ties are broken by insertion index.
#[derive(Clone, Debug)]
pub struct LocalMap {
    cell: f64,
    min_spacing: f64,
    points: Vec<Vector3<f64>>,
    cells: HashMap<[i64; 3], Vec<u32>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl LocalMap {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        Self { cell, min_spacing: 0.0, points: Vec::new(), cells: HashMap::new(), lo: [i64::MAX; 3], hi: [i64::MIN; 3] }
    }

    /// Insertions closer than `spacing` to an existing point are skipped.
    pub fn with_min_spacing(mut self, spacing: f64) -> Self {
        self.min_spacing = spacing;
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        [(p.x / self.cell).floor() as i64, (p.y / self.cell).floor() as i64, (p.z / self.cell).floor() as i64]
    }

    /// Returns whether the point was stored.
    pub fn insert(&mut self, p: Vector3<f64>) -> bool {
        if !p.iter().all(|v| v.is_finite()) {
            return false;
        }
        if self.min_spacing > 0.0 && !self.knn_within(&p, 1, self.min_spacing).is_empty() {
            return false;
        }
        let c = self.cell_of(&p);
        for i in 0..3 {
            self.lo[i] = self.lo[i].min(c[i]);
            self.hi[i] = self.hi[i].max(c[i]);
        }
        self.cells.entry(c).or_default().push(self.points.len() as u32);
        self.points.push(p);
        true
    }

    /// Exact k nearest neighbors sorted by (distance, index).
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<Neighbor> {
        self.knn_within(q, k, f64::INFINITY)
    }

    /// The k nearest neighbors among points strictly closer than `radius`.
    pub fn knn_within(&self, q: &Vector3<f64>, k: usize, radius: f64) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return best;
        }
        let qc = self.cell_of(q);
        // Chebyshev distance (in cells) to the nearest and farthest occupied cell bounds.
        let mut r_min = 0;
        let mut r_max = 0;
        for i in 0..3 {
            let below = self.lo[i] - qc[i];
            let above = qc[i] - self.hi[i];
            r_min = r_min.max(below).max(above);
            r_max = r_max.max((qc[i] - self.lo[i]).abs()).max((self.hi[i] - qc[i]).abs());
        }
        let r2 = radius * radius;
        let mut r = r_min;
        loop {
            // Points in rings beyond r are at least r cells away.
            let bound = (r - 1).max(0) as f64 * self.cell;
            if bound >= radius {
                break;
            }
            self.visit_ring(qc, r, |idx| {
                let d2 = (self.points[idx] - q).norm_squared();
                if d2 >= r2 {
                    return;
                }
                let cand = Neighbor { index: idx, dist2: d2 };
                if best.len() == k {
                    let last = best[k - 1];
                    if (d2, idx) >= (last.dist2, last.index) {
                        return;
                    }
                    best.pop();
                }
                let pos = best.partition_point(|n| (n.dist2, n.index) < (d2, idx));
                best.insert(pos, cand);
            });
            if r >= r_max {
                break;
            }
            if best.len() == k && best[k - 1].dist2.sqrt() < r as f64 * self.cell {
                break;
            }
            r += 1;
        }
        best
    }

    fn visit_ring(&self, c: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        let mut visit = |key: [i64; 3]| {
            if let Some(ids) = self.cells.get(&key) {
                for &i in ids {
                    f(i as usize);
                }
            }
        };
        if r == 0 {
            visit(c);
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                if dx.abs() == r || dy.abs() == r {
                    for dz in -r..=r {
                        visit([c[0] + dx, c[1] + dy, c[2] + dz]);
                    }
                } else {
                    visit([c[0] + dx, c[1] + dy, c[2] - r]);
                    visit([c[0] + dx, c[1] + dy, c[2] + r]);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssociationConfig {
    pub n_neighbors: usize,
    pub plane_rms_max: f64,
    pub assoc_dist_max: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self { n_neighbors: 5, plane_rms_max: 0.1, assoc_dist_max: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    /// The nearest map neighbor.
    pub anchor: Vector3<f64>,
    pub rms: f64,
    pub valid: bool,
}

impl PlaneFit {
    fn invalid() -> Self {
        Self { normal: Vector3::z(), anchor: Vector3::zeros(), rms: f64::INFINITY, valid: false }
    }
}

/// Least-squares plane through the neighbors, normal = smallest eigenvector
/// of the neighbor scatter.
pub fn fit_plane(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>, f64, f64) {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let normal = eig.eigenvectors.column(order[0]).normalize();
    let rms = (points.iter().map(|p| normal.dot(&(p - centroid)).powi(2)).sum::<f64>() / n).sqrt();
    (normal, centroid, rms, eig.eigenvalues[order[1]].max(0.0))
}

// Neighbor sets whose second scatter eigenvalue falls below this (m²) are
// nearly collinear; their normal is undetermined.
const MIN_SPREAD: f64 = 1e-6;
// The second eigenvalue must also dominate the smallest one: a noisy line
// (e.g. one scan ring) has two comparable small eigenvalues.
const MIN_PLANARITY: f64 = 4.0;

pub fn associate(p_world: &Vector3<f64>, map: &LocalMap, cfg: &AssociationConfig) -> PlaneFit {
    let k = cfg.n_neighbors.max(3);
    let nb = map.knn_within(p_world, k, cfg.assoc_dist_max);
    if nb.len() < k {
        return PlaneFit::invalid();
    }
    let pts: Vec<Vector3<f64>> = nb.iter().map(|n| map.points()[n.index]).collect();
    let (normal, _, rms, spread) = fit_plane(&pts);
    let smallest = rms * rms * pts.len() as f64;
    let valid = rms < cfg.plane_rms_max && spread > MIN_SPREAD && spread > MIN_PLANARITY * smallest;
    PlaneFit { normal, anchor: pts[0], rms, valid }
}

/// World-frame position of a sensor point under the state's active segment,
/// with the orientation kinematics kept for the Jacobian.
fn world_point(state: &SplineState, pt: &LidarPoint, ext: &Extrinsics) -> Result<(Vector3<f64>, Vector3<f64>, f64)> {
    let u = state.normalized_time(pt.t)?;
    let p_body = ext.to_body(&pt.p);
    let seg = state.orientation_segment()?;
    let r = OrientationKinematics::new(&seg, u, state.grid.tau).rotation();
    let s = position_eval(&state.position_segment(), u, state.grid.tau, Derivative::Value);
    Ok((r.rotate(&p_body) + s, p_body, u))
}

pub fn point_to_world(state: &SplineState, pt: &LidarPoint, ext: &Extrinsics) -> Result<Vector3<f64>> {
    world_point(state, pt, ext).map(|(p, _, _)| p)
}

/// Signed point-to-plane distance `nᵀ(R(t) p_I + s(t) − ᾱ)`.
pub fn point_residual(state: &SplineState, pt: &LidarPoint, ext: &Extrinsics, fit: &PlaneFit) -> Result<f64> {
    let (pw, _, _) = world_point(state, pt, ext)?;
    Ok(fit.normal.dot(&(pw - fit.anchor)))
}

/// `∂h/∂x` of [`point_residual`] as a 1×dim row.
pub fn point_jacobian(state: &SplineState, pt: &LidarPoint, ext: &Extrinsics, fit: &PlaneFit) -> Result<DMatrix<f64>> {
    let u = state.normalized_time(pt.t)?;
    let p_body = ext.to_body(&pt.p);
    let seg = state.orientation_segment()?;
    let kin = OrientationKinematics::new(&seg, u, state.grid.tau);
    let n = fit.normal.transpose();
    let mut h = DMatrix::zeros(1, state.dim());
    let lam = position_kinematics_matrix(u, state.grid.tau, Derivative::Value);
    h.view_mut((0, POS), (1, 12)).copy_from(&(n * lam));
    let d_rot = d_rotation_d_q(&kin.rotation(), &p_body) * kin.jacobian();
    h.view_mut((0, DELTA), (1, 12)).copy_from(&(n * d_rot));
    Ok(h)
}

/// Keep iff `H P Hᵀ + R < threshold`.
pub fn outlier_gate(h: &DMatrix<f64>, p: &DMatrix<f64>, r: f64, threshold: f64) -> bool {
    gate_variance(h, p, r) < threshold
}

/// Predicted residual variance `H P Hᵀ + R` of a scalar measurement.
pub fn gate_variance(h: &DMatrix<f64>, p: &DMatrix<f64>, r: f64) -> f64 {
    (h * p * h.transpose())[(0, 0)] + r
}

/// Keep iff the squared residual normalized by its predicted variance is
/// below `chi2`. A non-positive `chi2` disables the test.
pub fn innovation_gate(residual: f64, variance: f64, chi2: f64) -> bool {
    chi2 <= 0.0 || residual * residual < chi2 * variance
}

/// Point-to-plane measurement. With `map` set the point is re-associated at
/// every iterate; otherwise the fixed association is used.
pub struct PointModel<'a> {
    pub point: LidarPoint,
    pub extrinsics: Extrinsics,
    pub fit: PlaneFit,
    pub map: Option<(&'a LocalMap, AssociationConfig)>,
    pub variance: f64,
}

impl MeasurementModel for PointModel<'_> {
    fn linearize(&self, state: &SplineState) -> Result<Option<Linearization>> {
        let fit = match &self.map {
            Some((map, cfg)) => associate(&point_to_world(state, &self.point, &self.extrinsics)?, map, cfg),
            None => self.fit,
        };
        if !fit.valid {
            return Ok(None);
        }
        let h = point_residual(state, &self.point, &self.extrinsics, &fit)?;
        let jac = point_jacobian(state, &self.point, &self.extrinsics, &fit)?;
        Ok(Some(Linearization {
            residual: DVector::from_element(1, -h),
            jacobian: jac,
            noise: DMatrix::from_element(1, 1, self.variance),
        }))
    }
}

/// Moves points into the local map once the part of the trajectory they
/// depend on is final. Points at or before the watermark are never inserted
/// twice.
#[derive(Clone, Debug, Default)]
pub struct MapMaintainer {
    pending: VecDeque<LidarPoint>,
    watermark: f64,
    started: bool,
    keep_log: bool,
    log: Vec<(f64, Vector3<f64>)>,
}

impl MapMaintainer {
    pub fn new(keep_log: bool) -> Self {
        Self { keep_log, ..Self::default() }
    }

    /// Points must arrive in timestamp order.
    pub fn add_pending(&mut self, points: impl IntoIterator<Item = LidarPoint>) {
        self.pending.extend(points);
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn watermark(&self) -> f64 {
        self.watermark
    }

    pub fn log(&self) -> &[(f64, Vector3<f64>)] {
        &self.log
    }

    /// Inserts every pending point with `t < final_until` using `spline`.
    /// Returns the number of points stored in the map.
    pub fn maintain(
        &mut self,
        spline: &ControlPointSpline,
        final_until: f64,
        extrinsics: &[Extrinsics],
        map: &mut LocalMap,
    ) -> Result<usize> {
        let mut inserted = 0;
        while let Some(pt) = self.pending.front().copied() {
            if pt.t >= final_until {
                break;
            }
            self.pending.pop_front();
            if self.started && pt.t <= self.watermark {
                continue;
            }
            let ext = extrinsics
                .get(pt.sensor_id)
                .ok_or_else(|| Error::Input(format!("no extrinsics for sensor {}", pt.sensor_id)))?;
            let (s, r) = spline.pose(pt.t)?;
            let pw = r.rotate(&ext.to_body(&pt.p)) + s;
            if map.insert(pw) {
                inserted += 1;
            }
            if self.keep_log {
                self.log.push((pt.t, pw));
            }
            self.watermark = pt.t;
            self.started = true;
        }
        Ok(inserted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::SplineState;
    use crate::so3::exp_at_identity;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(t: f64, x: f64, y: f64, z: f64) -> LidarPoint {
        LidarPoint::new(t, Vector3::new(x, y, z), 0)
    }

    #[test]
    fn downsample_same_voxel() {
        let out = voxel_downsample(&[pt(0.0, 0.1, 0.1, 0.1), pt(0.1, 0.2, 0.2, 0.2)], 0.5);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn downsample_coarse_grid_kept() {
        let pts: Vec<_> = (0..27)
            .map(|i| pt(i as f64, (i % 3) as f64 + 0.5, ((i / 3) % 3) as f64 + 0.5, (i / 9) as f64 + 0.5))
            .collect();
        let out = voxel_downsample(&pts, 0.5);
        assert_eq!(out, pts);
    }

    #[test]
    fn downsample_keeps_point_nearest_centroid() {
        let out = voxel_downsample(&[pt(0.0, 0.0, 0.0, 0.0), pt(1.0, 0.2, 0.0, 0.0), pt(2.0, 0.4, 0.0, 0.0)], 0.5);
        assert_eq!(out, vec![pt(1.0, 0.2, 0.0, 0.0)]);
    }

    #[test]
    fn batches_respect_limits_and_knots() {
        let grid = KnotGrid::new(0.0, 0.01, 1).unwrap();
        let mut q: VecDeque<_> = (0..50).map(|i| Observation::Lidar(pt(i as f64 * 0.001, 1.0, 0.0, 0.0))).collect();
        let b = assemble_batch(&mut q, 100, 0.01, &grid);
        assert_eq!(b.len(), 10);
        assert!((b.last_t().unwrap() - 0.009).abs() < 1e-12);
        let b = assemble_batch(&mut q, 3, 0.01, &grid);
        assert_eq!(b.len(), 3);
        let b = assemble_batch(&mut q, 100, 0.0035, &grid);
        assert_eq!(b.len(), 4);
        let b = assemble_batch(&mut q, 1, 0.01, &grid);
        assert_eq!(b.len(), 1);
        let mut empty = VecDeque::new();
        assert!(assemble_batch(&mut empty, 10, 0.01, &grid).is_empty());
    }

    #[test]
    fn merged_streams_are_sorted() {
        let imu = [ImuSample::new(0.0025, Vector3::zeros(), Vector3::zeros())];
        let q = merge_streams(&[pt(0.003, 1.0, 0.0, 0.0), pt(0.001, 1.0, 0.0, 0.0)], &imu);
        let ts: Vec<f64> = q.iter().map(Observation::t).collect();
        assert_eq!(ts, vec![0.001, 0.0025, 0.003]);
    }

    fn brute_knn(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&a, &b| (points[a] - q).norm_squared().total_cmp(&(points[b] - q).norm_squared()).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    #[test]
    fn knn_matches_brute_force_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut map = LocalMap::new(0.7);
        for _ in 0..1000 {
            map.insert(Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0)));
        }
        for _ in 0..200 {
            let q = Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-4.0..4.0));
            let got: Vec<usize> = map.knn(&q, 5).iter().map(|n| n.index).collect();
            assert_eq!(got, brute_knn(map.points(), &q, 5));
        }
    }

    #[test]
    fn knn_returns_min_k_size() {
        let mut map = LocalMap::new(1.0);
        map.insert(Vector3::new(0.0, 0.0, 0.0));
        map.insert(Vector3::new(30.0, 0.0, 0.0));
        assert_eq!(map.knn(&Vector3::new(100.0, 0.0, 0.0), 5).len(), 2);
        assert_eq!(map.knn(&Vector3::zeros(), 1)[0].index, 0);
    }

    #[test]
    fn knn_ties_by_index() {
        let mut map = LocalMap::new(1.0);
        for p in [Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)] {
            map.insert(p);
        }
        let got: Vec<usize> = map.knn(&Vector3::zeros(), 2).iter().map(|n| n.index).collect();
        assert_eq!(got, vec![0, 1]);
    }

    #[test]
    fn min_spacing_skips_duplicates() {
        let mut map = LocalMap::new(1.0).with_min_spacing(0.1);
        assert!(map.insert(Vector3::zeros()));
        assert!(!map.insert(Vector3::new(0.05, 0.0, 0.0)));
        assert!(map.insert(Vector3::new(0.2, 0.0, 0.0)));
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn coplanar_fit() {
        let mut map = LocalMap::new(1.0);
        let n = Vector3::new(1.0, 2.0, 2.0) / 3.0;
        let (a, b) = (Vector3::new(2.0, -1.0, 0.0).normalize(), n.cross(&Vector3::new(2.0, -1.0, 0.0).normalize()));
        for (i, j) in [(0.0, 0.0), (0.3, 0.1), (-0.2, 0.25), (0.1, -0.3), (-0.25, -0.1)] {
            map.insert(a * i + b * j + n * 0.5);
        }
        let fit = associate(&(n * 0.5), &map, &AssociationConfig::default());
        assert!(fit.valid);
        assert!(fit.rms < 1e-12);
        assert_relative_eq!(fit.normal.dot(&n).abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn far_or_rough_neighbors_are_invalid() {
        let mut map = LocalMap::new(1.0);
        for i in 0..5 {
            map.insert(Vector3::new(i as f64 * 3.0, 0.0, (i % 2) as f64 * 0.01));
        }
        assert!(!associate(&Vector3::zeros(), &map, &AssociationConfig::default()).valid);
        let mut map = LocalMap::new(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..5 {
            map.insert(Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)));
        }
        let fit = associate(&Vector3::zeros(), &map, &AssociationConfig::default());
        assert!(!fit.valid || fit.rms < 0.1);
    }

    #[test]
    fn noisy_line_is_not_a_plane() {
        // one scan ring on a wall: points along x with centimetre jitter
        let mut map = LocalMap::new(1.0);
        let jitter = [(0.01, -0.02), (-0.015, 0.01), (0.02, 0.015), (-0.01, -0.01), (0.005, 0.02)];
        for (i, (dy, dz)) in jitter.into_iter().enumerate() {
            map.insert(Vector3::new(i as f64 * 0.3, dy, dz));
        }
        let fit = associate(&Vector3::new(0.6, 0.0, 0.0), &map, &AssociationConfig::default());
        assert!(fit.rms < 0.1);
        assert!(!fit.valid);
    }

    #[test]
    fn residual_by_substitution() {
        let state = SplineState::zeros(KnotGrid::new(0.0, 0.1, 1).unwrap(), false);
        let fit = PlaneFit { normal: Vector3::z(), anchor: Vector3::zeros(), rms: 0.0, valid: true };
        let r = point_residual(&state, &pt(0.05, 0.0, 0.0, 2.0), &Extrinsics::identity(), &fit).unwrap();
        assert_eq!(r, 2.0);
        let on_plane = point_residual(&state, &pt(0.05, 3.0, -1.0, 0.0), &Extrinsics::identity(), &fit).unwrap();
        assert_eq!(on_plane, 0.0);
    }

    fn random_case(rng: &mut impl Rng, with_biases: bool) -> (SplineState, LidarPoint, Extrinsics, PlaneFit) {
        let mut state = SplineState::zeros(KnotGrid::new(1.0, 0.05, 3).unwrap(), with_biases);
        for v in state.x.iter_mut() {
            *v = rng.random_range(-0.4..0.4);
        }
        state.anchor = exp_at_identity(&Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.3));
        let t = state.grid.span_start() + rng.random_range(0.0..1.0) * state.grid.tau;
        let point = pt(t, rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-3.0..3.0));
        let ext = Extrinsics::new(
            exp_at_identity(&Vector3::new(rng.random_range(-1.0..1.0), 0.2, -0.4)),
            Vector3::new(0.1, -0.2, 0.05),
        );
        let normal = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let fit = PlaneFit { normal, anchor: Vector3::new(1.0, 2.0, -0.5), rms: 0.0, valid: true };
        (state, point, ext, fit)
    }

    #[test]
    fn residual_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..100 {
            let (state, p, ext, fit) = random_case(&mut rng, false);
            // independent path: explicit control points and rotation matrices
            let u = (p.t - state.grid.span_start()) / state.grid.tau;
            let b = [(1.0 - u).powi(3) / 6.0, (3.0 * u.powi(3) - 6.0 * u * u + 4.0) / 6.0, (-3.0 * u.powi(3) + 3.0 * u * u + 3.0 * u + 1.0) / 6.0, u.powi(3) / 6.0];
            let s: Vector3<f64> = (0..4).map(|i| state.pos_rcp(i) * b[i]).sum();
            let lam = [1.0, b[1] + b[2] + b[3], b[2] + b[3], b[3]];
            let mut rot = state.anchor.to_rotmat();
            for i in 0..4 {
                rot *= exp_at_identity(&(state.delta(i) * lam[i])).to_rotmat();
            }
            let p_i = ext.rotation.to_rotmat() * p.p + ext.translation;
            let expected = fit.normal.dot(&(rot * p_i + s - fit.anchor));
            let got = point_residual(&state, &p, &ext, &fit).unwrap();
            assert!((got - expected).abs() < 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn jacobian_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (state, p, ext, fit) = random_case(&mut rng, true);
        let h = point_jacobian(&state, &p, &ext, &fit).unwrap();
        assert_eq!(h.ncols(), 30);
        assert!(h.columns(24, 6).iter().all(|v| *v == 0.0));
        let u = state.normalized_time(p.t).unwrap();
        let w = crate::spline::position_weights(u, state.grid.tau, Derivative::Value);
        for i in 0..4 {
            let block = Vector3::new(h[(0, 3 * i)], h[(0, 3 * i + 1)], h[(0, 3 * i + 2)]);
            assert_relative_eq!(block, fit.normal * w[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn outlier_gate_cases() {
        let p = DMatrix::identity(24, 24) * 0.01;
        let h = DMatrix::zeros(1, 24);
        assert!(outlier_gate(&h, &p, 0.04, 0.05));
        assert!(!outlier_gate(&h, &p, 0.06, 0.05));
        let h = DMatrix::from_element(1, 24, 0.3);
        assert!(gate_variance(&h, &(&p * 10.0), 0.01) > gate_variance(&h, &p, 0.01));
    }

    #[test]
    fn innovation_gate_cases() {
        assert!(innovation_gate(0.1, 0.01, 9.0));
        assert!(!innovation_gate(0.5, 0.01, 9.0));
        assert!(innovation_gate(100.0, 0.01, 0.0));
    }

    #[test]
    fn maintainer_watermark() {
        let mut spline = ControlPointSpline::new(0.0, 0.1);
        for i in 0..6 {
            spline.push(Vector3::new(i as f64, 0.0, 0.0), UnitQuaternion::identity());
        }
        let mut map = LocalMap::new(1.0);
        let mut m = MapMaintainer::new(true);
        m.add_pending([pt(0.05, 0.0, 0.0, 1.0), pt(0.15, 0.0, 0.0, 1.0), pt(0.25, 0.0, 0.0, 1.0)]);
        let ext = [Extrinsics::identity()];
        assert_eq!(m.maintain(&spline, 0.2, &ext, &mut map).unwrap(), 2);
        assert_eq!(m.maintain(&spline, 0.2, &ext, &mut map).unwrap(), 0);
        m.add_pending([pt(0.15, 0.0, 0.0, 1.0)]);
        assert_eq!(m.maintain(&spline, 0.3, &ext, &mut map).unwrap(), 1);
        assert_eq!(map.len(), 3);
        assert_relative_eq!(m.log()[0].1, Vector3::new(1.5, 0.0, 1.0), epsilon = 1e-12);
    }
}
