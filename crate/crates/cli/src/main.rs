use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resple::config::SensorSection;
use resple::eval::report_runtime;
use resple::io::{read_imu_log, read_lidar_log, read_trajectory, write_imu_log, write_lidar_log, write_trajectory};
use resple::simulator::simulate;
use resple::{evaluate_ape, run_odometry, Alignment, Error, Mode, RunConfig, RunReport, Streams};

#[derive(Parser)]
#[command(name = "resple", version, about = "Continuous-time LiDAR(-inertial) odometry on recursive B-splines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: LiDAR and IMU logs, ground truth and a matching run config.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run odometry on recorded logs.
    Run {
        #[command(flatten)]
        common: Common,
        /// LiDAR log (`t x y z sensor_id`); repeat for several files.
        #[arg(long = "lidar", required = true)]
        lidar: Vec<PathBuf>,
        /// IMU log (`t ax ay az gx gy gz`).
        #[arg(long)]
        imu: Option<PathBuf>,
        /// Ground truth; adds the APE to the report.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Trajectory output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the JSON run report here instead of stderr.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// APE RMSE of an estimated trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Rigidly align the estimate before measuring.
        #[arg(long)]
        se3: bool,
    },
    /// Simulate in memory and report accuracy and runtime efficiency.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Print the effective configuration (all defaults when no file is given).
    DumpConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// LO, LIO, MLO or MLIO.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(mode) = self.mode {
            cfg.run.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.simulate.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Simulation settings that follow from the run mode.
fn prepare_simulation(cfg: &mut RunConfig) {
    if cfg.run.mode.multi_lidar() {
        cfg.simulate.lidars = cfg.simulate.lidars.max(2);
    }
}

fn write_json(path: Option<&Path>, value: &RunReport) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Error::Input(format!("{}: {e}", p.display()))),
        None => {
            eprintln!("{text}");
            Ok(())
        }
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Simulate { common, out } => {
            let mut cfg = common.load()?;
            prepare_simulation(&mut cfg);
            let data = simulate(&cfg.simulate);
            for id in 0..data.extrinsics.len() {
                let points: Vec<_> = data.lidar.iter().filter(|p| p.sensor_id == id).copied().collect();
                write_lidar_log(&out.join(format!("lidar{id}.txt")), &points)?;
            }
            write_imu_log(&out.join("imu.txt"), &data.imu)?;
            write_trajectory(&out.join("gt.txt"), &data.ground_truth)?;
            cfg.sensors = data.extrinsics.iter().map(SensorSection::from_extrinsics).collect();
            let cfg_path = out.join("config.toml");
            std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::Input(format!("{}: {e}", cfg_path.display())))?;
            println!(
                "wrote {} LiDAR points, {} IMU samples and {} ground-truth poses to {}",
                data.lidar.len(),
                data.imu.len(),
                data.ground_truth.len(),
                out.display()
            );
        }
        Command::Run { common, lidar, imu, gt, out, report } => {
            let cfg = common.load()?;
            let mut streams = Streams { lidar: Vec::new(), imu: Vec::new() };
            for path in &lidar {
                streams.lidar.extend(read_lidar_log(path)?);
            }
            if let Some(path) = &imu {
                streams.imu = read_imu_log(path)?;
            }
            let (traj, mut rep) = run_odometry(&cfg, &streams)?;
            if let Some(path) = &gt {
                rep.ape_rmse = Some(evaluate_ape(&traj, &read_trajectory(path)?, cfg.run.align)?);
            }
            match &out {
                Some(path) => write_trajectory(path, &traj)?,
                None => print!("{}", resple::io::format_trajectory(&traj)),
            }
            write_json(report.as_deref(), &rep)?;
        }
        Command::Eval { est, gt, se3 } => {
            let align = if se3 { Alignment::Se3 } else { Alignment::None };
            let ape = evaluate_ape(&read_trajectory(&est)?, &read_trajectory(&gt)?, align)?;
            println!("{ape:.9}");
        }
        Command::Bench { common } => {
            let mut cfg = common.load()?;
            prepare_simulation(&mut cfg);
            let data = simulate(&cfg.simulate);
            cfg.sensors = data.extrinsics.iter().map(SensorSection::from_extrinsics).collect();
            let streams = Streams { lidar: data.lidar, imu: data.imu };
            let (traj, rep) = run_odometry(&cfg, &streams)?;
            let runtime = report_runtime(&rep.per_batch_times, cfg.run.batch_span)?;
            let summary = serde_json::json!({
                "mode": rep.mode,
                "batches": rep.batches,
                "ape_rmse": evaluate_ape(&traj, &data.ground_truth, cfg.run.align)?,
                "runtime": runtime,
                "iterations_mean": rep.iterations_mean,
                "gate_rejection_rate": rep.gate_rejection_rate,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::DumpConfig { config } => {
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
