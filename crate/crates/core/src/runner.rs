//! End-to-end odometry: ingest → downsample → batch → predict → iterated
//! update → map maintenance.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::estimator::{iterated_update_from, Gaussian, MeasurementModel, RecursiveSplineEstimator, SplineState, UpdateOutcome};
use crate::eval::{report_runtime, RuntimeStats, Trajectory};
use crate::imu::{align_gravity, GravityVector, ImuModel, ImuSample};
use crate::lidar::{
    assemble_batch, associate, AssociationConfig, gate_variance, innovation_gate, merge_streams, point_jacobian, point_residual,
    point_to_world, voxel_downsample, Extrinsics, LidarPoint, LocalMap, MapMaintainer, PlaneFit, PointModel,
};
use crate::so3::UnitQuaternion;
use crate::spline::KnotGrid;

#[derive(Clone, Debug, Default)]
pub struct Streams {
    pub lidar: Vec<LidarPoint>,
    pub imu: Vec<ImuSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Decision {
    Used,
    NoAssociation,
    VarianceGate,
    InnovationGate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PointDecision {
    pub t: f64,
    pub sensor_id: usize,
    pub decision: Decision,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub batches: usize,
    pub knot_extensions: usize,
    /// Wall-clock processing time of each batch (s).
    pub per_batch_times: Vec<f64>,
    pub runtime: Option<RuntimeStats>,
    pub iterations_mean: f64,
    pub iterations_max: usize,
    pub lidar_points_raw: usize,
    pub lidar_points_processed: usize,
    pub points_used: usize,
    pub rejected_association: usize,
    pub rejected_variance: usize,
    pub rejected_innovation: usize,
    /// Share of associated points rejected by the gates.
    pub gate_rejection_rate: f64,
    pub imu_samples_used: usize,
    pub max_posterior_residual: Option<f64>,
    pub map_size: usize,
    pub ape_rmse: Option<f64>,
    #[serde(skip)]
    pub decisions: Vec<PointDecision>,
    /// Belief after the last batch.
    #[serde(skip)]
    pub final_belief: Option<Gaussian>,
}

struct Candidate {
    point: LidarPoint,
    fit: PlaneFit,
    decision: Decision,
}

fn initial_orientation(cfg: &RunConfig, imu: &[ImuSample]) -> Result<UnitQuaternion> {
    if let Some([w, x, y, z]) = cfg.init.orientation {
        return Ok(UnitQuaternion::new(w, x, y, z));
    }
    if cfg.run.mode.uses_imu() {
        return align_gravity(imu, cfg.imu.align_duration);
    }
    Ok(UnitQuaternion::identity())
}

fn select_lidar(cfg: &RunConfig, lidar: &[LidarPoint], extrinsics: &[Extrinsics]) -> Result<Vec<LidarPoint>> {
    let ids: BTreeSet<usize> = lidar.iter().map(|p| p.sensor_id).collect();
    let mode = cfg.run.mode;
    if mode.multi_lidar() && ids.len() < 2 {
        return Err(Error::Input(format!("{mode:?} needs points from at least two LiDARs, found {}", ids.len())));
    }
    if let Some(id) = ids.iter().find(|id| **id >= extrinsics.len()) {
        if mode.multi_lidar() || *id == 0 {
            return Err(Error::Input(format!("no extrinsics configured for sensor {id}")));
        }
    }
    let keep = |p: &&LidarPoint| (mode.multi_lidar() || p.sensor_id == 0) && p.is_valid(cfg.lidar.min_range, cfg.lidar.max_range);
    let mut pts: Vec<LidarPoint> = lidar.iter().filter(keep).copied().collect();
    pts.sort_by(|a, b| a.t.total_cmp(&b.t));
    if pts.is_empty() {
        return Err(Error::Input("no usable LiDAR points".into()));
    }
    Ok(pts)
}

/// Point-to-plane residual at `state`, re-associating when configured;
/// `None` when the point no longer has a valid plane.
fn posterior_residual(
    state: &SplineState,
    m: &PointModel,
    map: &LocalMap,
    cfg: &RunConfig,
    assoc: &AssociationConfig,
) -> Result<Option<f64>> {
    let fit = if cfg.lidar.reassociate {
        associate(&point_to_world(state, &m.point, &m.extrinsics)?, map, assoc)
    } else {
        m.fit
    };
    if !fit.valid {
        return Ok(None);
    }
    Ok(Some(point_residual(state, &m.point, &m.extrinsics, &fit)?))
}

fn sample_times(start: f64, end: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = ((end - start) / step).floor().max(0.0) as usize;
    (0..=n).map(move |i| start + i as f64 * step)
}

/// Runs the estimator over the streams and samples the posterior trajectory.
pub fn run_odometry(cfg: &RunConfig, streams: &Streams) -> Result<(Trajectory, RunReport)> {
    cfg.validate()?;
    let mode = cfg.run.mode;
    let extrinsics = cfg.extrinsics()?;
    let lidar = select_lidar(cfg, &streams.lidar, &extrinsics)?;
    let mut imu: Vec<ImuSample> = Vec::new();
    if mode.uses_imu() {
        if streams.imu.is_empty() {
            return Err(Error::Input(format!("{mode:?} needs an IMU stream")));
        }
        for s in &streams.imu {
            s.validate()?;
        }
        imu = streams.imu.clone();
        imu.sort_by(|a, b| a.t.total_cmp(&b.t));
    }
    let mut report = RunReport { mode, lidar_points_raw: streams.lidar.len(), ..RunReport::default() };

    let tau = cfg.tau();
    let t_start = lidar[0].t + cfg.run.bootstrap_duration;
    let orientation = initial_orientation(cfg, &imu)?;
    let position = Vector3::from(cfg.init.position);
    let assoc = cfg.lidar.association();
    let r_lidar = cfg.lidar.sigma.powi(2);
    let gravity = GravityVector::up(cfg.imu.gravity_magnitude);

    // Seed the map from the initial window at the initial pose.
    let mut map = LocalMap::new(cfg.lidar.map_cell).with_min_spacing(cfg.lidar.map_min_spacing);
    let split = lidar.partition_point(|p| p.t < t_start);
    for p in voxel_downsample(&lidar[..split], cfg.lidar.leaf_size) {
        map.insert(orientation.rotate(&extrinsics[p.sensor_id].to_body(&p.p)) + position);
    }

    let grid = KnotGrid::new(t_start, tau, 1)?;
    let mean = SplineState::stationary(grid, position, orientation, mode.uses_imu());
    let initial = Gaussian::with_diagonal(mean, &cfg.initial_sigma());
    let mut est = RecursiveSplineEstimator::new(initial, cfg.process_noise(), cfg.update_settings())?;
    let mut maintainer = MapMaintainer::new(false);

    let imu_start = imu.partition_point(|s| s.t < t_start);
    let mut queue = merge_streams(&lidar[split..], &imu[imu_start..]);
    let mut last_t = t_start;
    let mut iterations_total = 0usize;
    let mut max_residual: f64 = 0.0;

    while !queue.is_empty() {
        let batch_index = report.batches;
        let wrap = |e: Error| Error::Estimator { batch: batch_index, source: Box::new(e) };
        let batch = assemble_batch(&mut queue, cfg.run.batch_max, cfg.run.batch_span, &est.state().grid);
        let started = Instant::now();
        let t_first = batch.first_t().expect("non-empty batch");
        report.knot_extensions += est.predict(t_first).map_err(wrap)?;
        let final_until = est.finalized_until();
        maintainer.maintain(est.history(), final_until, &extrinsics, &mut map)?;

        let raw: Vec<LidarPoint> = batch.lidar().copied().collect();
        let points = voxel_downsample(&raw, cfg.lidar.leaf_size);
        report.lidar_points_processed += points.len();

        let prior = est.belief();
        let candidates: Vec<Result<Candidate>> = points
            .par_iter()
            .map(|p| {
                let ext = &extrinsics[p.sensor_id];
                let pw = point_to_world(&prior.mean, p, ext)?;
                let fit = associate(&pw, &map, &assoc);
                if !fit.valid {
                    return Ok(Candidate { point: *p, fit, decision: Decision::NoAssociation });
                }
                let h = point_jacobian(&prior.mean, p, ext, &fit)?;
                let variance = gate_variance(&h, &prior.cov, r_lidar);
                let decision = if variance >= cfg.lidar.outlier_threshold {
                    Decision::VarianceGate
                } else if !innovation_gate(point_residual(&prior.mean, p, ext, &fit)?, variance, cfg.lidar.innovation_gate) {
                    Decision::InnovationGate
                } else {
                    Decision::Used
                };
                Ok(Candidate { point: *p, fit, decision })
            })
            .collect();
        let candidates: Vec<Candidate> = candidates.into_iter().collect::<Result<_>>().map_err(wrap)?;

        let mut candidates = candidates;
        let imu_models: Vec<ImuModel> = batch
            .imu()
            .map(|s| ImuModel { sample: *s, gravity, sigma_acc: cfg.imu.sigma_acc, sigma_gyro: cfg.imu.sigma_gyro })
            .collect();
        report.imu_samples_used += imu_models.len();

        let prior = prior.clone();
        let mut pass = 0;
        let mut previous = None;
        let outcome = loop {
            let point_models: Vec<(usize, PointModel)> = candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| c.decision == Decision::Used)
                .map(|(i, c)| {
                    let model = PointModel {
                        point: c.point,
                        extrinsics: extrinsics[c.point.sensor_id],
                        fit: c.fit,
                        map: cfg.lidar.reassociate.then_some((&map, assoc)),
                        variance: r_lidar,
                    };
                    (i, model)
                })
                .collect();
            let mut models: Vec<&dyn MeasurementModel> = Vec::with_capacity(point_models.len() + imu_models.len());
            models.extend(point_models.iter().map(|(_, m)| m as &dyn MeasurementModel));
            models.extend(imu_models.iter().map(|m| m as &dyn MeasurementModel));
            let start = previous.as_ref().map_or(&prior.mean, |o: &UpdateOutcome| &o.posterior.mean);
            let outcome = iterated_update_from(&prior, start, &models, est.settings()).map_err(wrap)?;
            if cfg.lidar.posterior_gate <= 0.0 || pass >= cfg.lidar.posterior_passes {
                break outcome;
            }
            let post = &outcome.posterior.mean;
            let failed: Vec<usize> = point_models
                .par_iter()
                .map(|(i, m)| Ok((*i, point_residual(post, &m.point, &m.extrinsics, &m.fit)?)))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?
                .into_iter()
                .filter(|(_, r)| r * r > cfg.lidar.posterior_gate * r_lidar)
                .map(|(i, _)| i)
                .collect();
            if failed.is_empty() {
                break outcome;
            }
            for i in failed {
                candidates[i].decision = Decision::InnovationGate;
            }
            previous = Some(outcome);
            pass += 1;
        };
        est.set_belief(outcome.posterior.clone()).map_err(wrap)?;
        iterations_total += outcome.iterations;
        report.iterations_max = report.iterations_max.max(outcome.iterations);

        let mut insert_later = Vec::new();
        for c in &candidates {
            match c.decision {
                Decision::Used => report.points_used += 1,
                Decision::NoAssociation => report.rejected_association += 1,
                Decision::VarianceGate => report.rejected_variance += 1,
                Decision::InnovationGate => report.rejected_innovation += 1,
            }
            if matches!(c.decision, Decision::Used | Decision::NoAssociation) {
                insert_later.push(c.point);
            }
            if cfg.run.record_decisions {
                report.decisions.push(PointDecision { t: c.point.t, sensor_id: c.point.sensor_id, decision: c.decision });
            }
        }

        if cfg.run.track_residuals {
            let post = est.state();
            for c in candidates.iter().filter(|c| c.decision == Decision::Used) {
                let m = PointModel { point: c.point, extrinsics: extrinsics[c.point.sensor_id], fit: c.fit, map: None, variance: r_lidar };
                if let Some(r) = posterior_residual(post, &m, &map, cfg, &assoc).map_err(wrap)? {
                    max_residual = max_residual.max(r.abs());
                }
            }
        }
        maintainer.add_pending(insert_later);
        report.per_batch_times.push(started.elapsed().as_secs_f64());
        report.batches += 1;
        last_t = batch.last_t().unwrap_or(last_t);
    }

    let spline = est.trajectory_spline();
    let step = if cfg.run.output_rate > 0.0 { 1.0 / cfg.run.output_rate } else { tau };
    let end = last_t.min(spline.span().map_or(t_start, |(_, e)| e));
    let trajectory = Trajectory::from_spline(&spline, sample_times(t_start, end, step))?;

    let gated = report.points_used + report.rejected_variance + report.rejected_innovation;
    report.gate_rejection_rate =
        if gated > 0 { (report.rejected_variance + report.rejected_innovation) as f64 / gated as f64 } else { 0.0 };
    report.iterations_mean = if report.batches > 0 { iterations_total as f64 / report.batches as f64 } else { 0.0 };
    report.runtime = report_runtime(&report.per_batch_times, cfg.run.batch_span).ok();
    report.max_posterior_residual = cfg.run.track_residuals.then_some(max_residual);
    report.map_size = map.len();
    report.final_belief = Some(est.belief().clone());
    Ok((trajectory, report))
}
