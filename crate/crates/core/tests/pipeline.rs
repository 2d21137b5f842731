use approx::assert_relative_eq;
use nalgebra::Vector3;
use resple::config::SensorSection;
use resple::imu::imu_prediction;
use resple::io::{read_trajectory, write_trajectory};
use resple::lidar::{point_to_world, Extrinsics};
use resple::simulator::{raycast, simulate, Dynamics, ImuOptions, PlaneWorld, RaycastOptions, ScanPattern, SimConfig, SimData, synth_imu, gen_truth};
use resple::so3::log_at_identity;
use resple::{
    evaluate_ape, run_odometry, Alignment, ControlPointSpline, Error, GravityVector, KnotGrid, Mode, RunConfig, SplineState,
    Streams,
};

fn config_for(data: &SimData, mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.mode = mode;
    cfg.sensors = data.extrinsics.iter().map(SensorSection::from_extrinsics).collect();
    cfg
}

fn streams(data: &SimData) -> Streams {
    Streams { lidar: data.lidar.clone(), imu: data.imu.clone() }
}

fn short_sim(lidars: usize) -> SimData {
    simulate(&SimConfig { duration: 3.0, lidars, ..SimConfig::default() })
}

/// Filter state whose active segment is segment `k` of `spline`.
fn state_on(spline: &ControlPointSpline, k: usize) -> SplineState {
    let grid = KnotGrid::new(spline.t0, spline.tau, k as i64 + 1).unwrap();
    let mut state = SplineState::zeros(grid, true);
    state.anchor = spline.rotations[k];
    for i in 0..4 {
        state.set_pos_rcp(i, &spline.positions[k + i]);
        if i > 0 {
            let inc = log_at_identity(&(spline.rotations[k + i - 1].inverse() * spline.rotations[k + i]));
            state.set_delta(i, &inc);
        }
    }
    state
}

#[test]
fn runs_are_deterministic() {
    let data = short_sim(1);
    let cfg = config_for(&data, Mode::LIO);
    let (a, ra) = run_odometry(&cfg, &streams(&data)).unwrap();
    let (b, rb) = run_odometry(&cfg, &streams(&data)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.points_used, rb.points_used);
    assert_eq!(ra.rejected_innovation, rb.rejected_innovation);
}

#[test]
fn every_mode_tracks_the_truth() {
    let data = short_sim(2);
    for mode in [Mode::LO, Mode::LIO, Mode::MLO, Mode::MLIO] {
        let (traj, report) = run_odometry(&config_for(&data, mode), &streams(&data)).unwrap();
        let ape = evaluate_ape(&traj, &data.ground_truth, Alignment::None).unwrap();
        assert!(ape < 0.05, "{mode:?}: APE {ape}");
        assert_eq!(report.imu_samples_used > 0, mode.uses_imu(), "{mode:?}");
    }
}

#[test]
fn mode_requirements_are_input_errors() {
    let single = short_sim(1);
    let err = run_odometry(&config_for(&single, Mode::MLO), &streams(&single)).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
    let no_imu = Streams { imu: Vec::new(), ..streams(&single) };
    let err = run_odometry(&config_for(&single, Mode::LIO), &no_imu).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn trajectory_file_round_trip_keeps_ape() {
    let data = short_sim(1);
    let (traj, _) = run_odometry(&config_for(&data, Mode::LO), &streams(&data)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("est.txt");
    write_trajectory(&path, &traj).unwrap();
    let back = read_trajectory(&path).unwrap();
    assert_eq!(evaluate_ape(&back, &traj, Alignment::None).unwrap(), 0.0);
    assert_relative_eq!(
        evaluate_ape(&back, &data.ground_truth, Alignment::None).unwrap(),
        evaluate_ape(&traj, &data.ground_truth, Alignment::None).unwrap(),
        epsilon = 1e-12
    );
}

#[test]
fn noiseless_imu_matches_model_on_the_true_state() {
    let truth = gen_truth(4, 4.0, Dynamics::High);
    let opts = ImuOptions { b_acc: Vector3::new(0.1, -0.2, 0.05), b_gyro: Vector3::new(0.01, 0.0, -0.02), ..ImuOptions::default() };
    let samples = synth_imu(&truth, &opts, 1);
    let spline = &truth.spline;
    let mut worst: f64 = 0.0;
    for s in samples.iter().step_by(7) {
        let k = KnotGrid::new(spline.t0, spline.tau, 0).unwrap().segment_index(s.t) as usize;
        if k + 4 > spline.positions.len() {
            continue;
        }
        let mut state = state_on(spline, k);
        state.set_b_acc(&opts.b_acc);
        state.set_b_gyro(&opts.b_gyro);
        worst = worst.max((imu_prediction(&state, s, &GravityVector::up(9.81)).unwrap() - s.measurement()).amax());
    }
    assert!(worst < 1e-8, "max IMU residual {worst}");
}

#[test]
fn noiseless_points_lie_on_their_patches() {
    let truth = gen_truth(5, 2.0, Dynamics::High);
    let world = PlaneWorld::hall(5);
    let ext = Extrinsics::new(resple::so3::exp_at_identity(&Vector3::new(0.1, -0.2, 0.3)), Vector3::new(0.1, 0.0, 0.2));
    let out = raycast(&world, &truth, &ScanPattern::spinning(5000.0), &RaycastOptions { extrinsics: ext, ..RaycastOptions::default() }, 3);
    assert!(out.points.len() > 5000);
    let spline = &truth.spline;
    for (p, patch) in out.points.iter().zip(&out.patch).step_by(3) {
        let k = KnotGrid::new(spline.t0, spline.tau, 0).unwrap().segment_index(p.t) as usize;
        if k + 4 > spline.positions.len() {
            continue;
        }
        let world_point = point_to_world(&state_on(spline, k), p, &ext).unwrap();
        let d = world.patches[*patch].signed_distance(&world_point);
        assert!(d.abs() < 1e-8, "point at t={} is {d} m off its patch", p.t);
    }
}
