//! Line-delimited text logs.
//!
//! * LiDAR: `t x y z sensor_id`
//! * IMU: `t ax ay az gx gy gz`
//! * Trajectory: `t x y z qx qy qz qw` (quaternion w last on disk)
//!
//! Blank lines and lines starting with `#` are ignored.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::eval::{Pose, Trajectory};
use crate::imu::ImuSample;
use crate::lidar::LidarPoint;
use crate::so3::UnitQuaternion;

fn parse_rows<T>(path: &Path, cols: usize, mut build: impl FnMut(&[f64]) -> Result<T, String>) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text(path, &text, cols, &mut build)
}

fn parse_text<T>(
    path: &Path,
    text: &str,
    cols: usize,
    build: &mut impl FnMut(&[f64]) -> Result<T, String>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut vals = Vec::with_capacity(cols);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        vals.clear();
        for tok in line.split_whitespace() {
            vals.push(tok.parse::<f64>().map_err(|e| err(format!("bad number {tok:?}: {e}")))?);
        }
        if vals.len() != cols {
            return Err(err(format!("expected {cols} columns, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        out.push(build(&vals).map_err(err)?);
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn read_lidar_log(path: &Path) -> Result<Vec<LidarPoint>> {
    parse_rows(path, 5, |v| {
        if v[4] < 0.0 || v[4].fract() != 0.0 {
            return Err(format!("sensor id {} is not a non-negative integer", v[4]));
        }
        Ok(LidarPoint::new(v[0], Vector3::new(v[1], v[2], v[3]), v[4] as usize))
    })
}

pub fn write_lidar_log(path: &Path, points: &[LidarPoint]) -> Result<()> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "# t x y z sensor_id")?;
        for p in points {
            writeln!(w, "{} {} {} {} {}", p.t, p.p.x, p.p.y, p.p.z, p.sensor_id)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_imu_log(path: &Path) -> Result<Vec<ImuSample>> {
    parse_rows(path, 7, |v| {
        let s = ImuSample::new(v[0], Vector3::new(v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6]));
        s.validate().map_err(|e| e.to_string())?;
        Ok(s)
    })
}

pub fn write_imu_log(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "# t ax ay az gx gy gz")?;
        for s in samples {
            writeln!(w, "{} {} {} {} {} {} {}", s.t, s.acc.x, s.acc.y, s.acc.z, s.gyro.x, s.gyro.y, s.gyro.z)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let poses = parse_rows(path, 8, |v| {
        let norm = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(format!("quaternion norm {norm} is not 1"));
        }
        Ok(Pose {
            t: v[0],
            position: Vector3::new(v[1], v[2], v[3]),
            orientation: UnitQuaternion::new(v[7], v[4], v[5], v[6]),
        })
    })?;
    Trajectory::new(poses).map_err(|e| match e {
        Error::Input(msg) => Error::Parse { path: path.to_path_buf(), line: 0, msg },
        other => other,
    })
}

pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut s = String::from("# t x y z qx qy qz qw\n");
    for p in traj.poses() {
        let q = p.orientation;
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            p.t,
            p.position.x,
            p.position.y,
            p.position.z,
            q.x(),
            q.y(),
            q.z(),
            q.w()
        ));
    }
    s
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(format_trajectory(traj).as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::exp_at_identity;

    #[test]
    fn lidar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lidar.txt");
        let pts = vec![
            LidarPoint::new(0.1, Vector3::new(1.0 / 3.0, -2.5, 1e-7), 0),
            LidarPoint::new(0.2, Vector3::new(4.0, 5.0, 6.0), 1),
        ];
        write_lidar_log(&path, &pts).unwrap();
        assert_eq!(read_lidar_log(&path).unwrap(), pts);
    }

    #[test]
    fn imu_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.txt");
        let s = vec![ImuSample::new(0.005, Vector3::new(0.1, 0.2, 9.81), Vector3::new(-0.01, 0.0, 0.3))];
        write_imu_log(&path, &s).unwrap();
        assert_eq!(read_imu_log(&path).unwrap(), s);
    }

    #[test]
    fn trajectory_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let traj = Trajectory::new(
            (0..20)
                .map(|i| Pose {
                    t: i as f64 * 0.01,
                    position: Vector3::new(i as f64 / 7.0, 0.3, -1.0),
                    orientation: exp_at_identity(&Vector3::new(0.1 * i as f64, 0.2, -0.3)),
                })
                .collect(),
        )
        .unwrap();
        write_trajectory(&path, &traj).unwrap();
        let back = read_trajectory(&path).unwrap();
        for (a, b) in back.poses().iter().zip(traj.poses()) {
            assert_eq!((a.t, a.position), (b.t, b.position));
            assert!((a.orientation.as_vector4() - b.orientation.as_vector4()).amax() < 1e-15);
        }
    }

    #[test]
    fn parse_errors_carry_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "# header\n0.1 1 2 3 0\n0.2 1 x 3 0\n").unwrap();
        match read_lidar_log(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "0.1 1 2 3\n").unwrap();
        assert!(matches!(read_lidar_log(&path), Err(Error::Parse { line: 1, .. })));
        fs::write(&path, "0.1 1 2 3 0.5\n").unwrap();
        assert!(read_lidar_log(&path).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_imu_log(Path::new("/nonexistent/imu.txt")), Err(Error::Io { .. })));
    }
}
