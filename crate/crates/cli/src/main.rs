//! Command-line entry point: run odometry over a scan sequence, generate
//! synthetic datasets, and evaluate trajectories.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scanweave_core::io::{
    write_scan_csv, write_trajectory, FrameDiagnostics, RunReport, ScanRecord, SequenceSource,
};
use scanweave_core::metrics::{desk_lengths, rte};
use scanweave_core::pipeline::{OdometryPipeline, PipelineConfig};
use scanweave_core::se3::Pose;
use scanweave_core::sim::{generate_sequence, ScriptedTrajectory, SensorParams, World};
use nalgebra::Vector3;

#[derive(Parser)]
#[command(name = "scanweave", version, about = "Lidar odometry over a sliding-window pose graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry over a directory of scans.
    Run(RunArgs),
    /// Generate a synthetic scan sequence with ground truth.
    Simulate(SimulateArgs),
    /// Evaluate a trajectory against ground truth.
    Evaluate(EvaluateArgs),
}

/// Pipeline tunables; unset flags fall back to the config file, then to
/// the built-in defaults.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Config file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long)]
    v_map: Option<f64>,
    #[arg(long)]
    v_icp: Option<f64>,
    #[arg(long)]
    d_max: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    conv_eps: Option<f64>,
    #[arg(long)]
    max_icp_iters: Option<usize>,
    #[arg(long)]
    min_corrs: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Keyframe eviction distance; derived as max-range / 3 when omitted.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lm_iters: Option<usize>,
    #[arg(long)]
    max_range: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Sequence directory (.bin or .csv scans, optional poses.txt).
    input: PathBuf,
    /// Output directory for trajectory.txt and report.json.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Synthesize per-point timestamps from azimuth for scans without
    /// them.
    #[arg(long)]
    synth_timestamps: bool,
    #[command(flatten)]
    config: ConfigFlags,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for scan CSVs and poses.txt.
    #[arg(long, short, default_value = "dataset")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Cruise speed, m/s.
    #[arg(long, default_value_t = 10.0)]
    speed: f64,
    /// Frame period, seconds.
    #[arg(long, default_value_t = 0.1)]
    dt: f64,
    /// Yaw rate during the turning third of the drive, deg/s.
    #[arg(long, default_value_t = 15.0)]
    turn_rate: f64,
    /// Straight drive only.
    #[arg(long)]
    straight: bool,
    /// Total rays per scan (rounded down to a multiple of 64).
    #[arg(long, default_value_t = 64 * 520)]
    rays: usize,
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 100.0)]
    max_range: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Attach per-point sweep timestamps to the scans.
    #[arg(long)]
    with_timestamps: bool,
    /// Per-frame attitude jitter, degrees (vehicle suspension).
    #[arg(long, default_value_t = 0.7)]
    jitter_deg: f64,
    /// Per-frame height jitter, meters.
    #[arg(long, default_value_t = 0.035)]
    jitter_z: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Estimated trajectory (KITTI 3x4 rows).
    estimate: PathBuf,
    /// Ground-truth trajectory.
    ground_truth: PathBuf,
    /// Segment lengths in meters.
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<f64>,
    /// Start-frame stride for segment evaluation.
    #[arg(long, default_value_t = 1)]
    rte_step: usize,
    /// Where to write rte.json.
    #[arg(long, default_value = "rte.json")]
    out: PathBuf,
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

/// SCANWEAVE_THREADS bounds internal parallelism; unset uses all cores.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("SCANWEAVE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Precedence: flags > config file > built-in defaults.
fn resolve_config(flags: &ConfigFlags) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &flags.config {
        apply_config_file(&mut cfg, path)?;
    }
    if let Some(v) = flags.v_map {
        cfg.v_map = v;
    }
    if let Some(v) = flags.v_icp {
        cfg.v_icp = v;
    }
    if let Some(v) = flags.d_max {
        cfg.d_max = v;
    }
    if let Some(v) = flags.tau {
        cfg.tau = v;
    }
    if let Some(v) = flags.conv_eps {
        cfg.conv_eps = v;
    }
    if let Some(v) = flags.max_icp_iters {
        cfg.max_icp_iters = v;
    }
    if let Some(v) = flags.min_corrs {
        cfg.min_corrs = v;
    }
    if let Some(v) = flags.kappa {
        cfg.kappa = v;
    }
    if let Some(v) = flags.gamma {
        cfg.gamma = Some(v);
    }
    if let Some(v) = flags.lm_iters {
        cfg.lm_iters = v;
    }
    if let Some(v) = flags.max_range {
        cfg.max_lidar_range = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_config_file(cfg: &mut PipelineConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key = value", path.display(), lineno + 1);
        };
        let key = key.trim();
        let value = value.trim();
        let bad = || format!("{}:{}: bad value for {key}", path.display(), lineno + 1);
        match key {
            "v_map" => cfg.v_map = value.parse().with_context(bad)?,
            "v_icp" => cfg.v_icp = value.parse().with_context(bad)?,
            "d_max" => cfg.d_max = value.parse().with_context(bad)?,
            "tau" => cfg.tau = value.parse().with_context(bad)?,
            "conv_eps" => cfg.conv_eps = value.parse().with_context(bad)?,
            "max_icp_iters" => cfg.max_icp_iters = value.parse().with_context(bad)?,
            "min_corrs" => cfg.min_corrs = value.parse().with_context(bad)?,
            "kappa" => cfg.kappa = value.parse().with_context(bad)?,
            "gamma" => cfg.gamma = Some(value.parse().with_context(bad)?),
            "lm_iters" => cfg.lm_iters = value.parse().with_context(bad)?,
            "max_range" | "max_lidar_range" => {
                cfg.max_lidar_range = value.parse().with_context(bad)?
            }
            other => bail!("{}:{}: unknown key '{other}'", path.display(), lineno + 1),
        }
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = resolve_config(&args.config)?;
    let sequence = SequenceSource::from_directory(&args.input, config.max_lidar_range)?;
    eprintln!(
        "sequence: {} scans from {}",
        sequence.len(),
        args.input.display()
    );

    let mut pipeline = OdometryPipeline::new(config)?;
    let mut frames = Vec::with_capacity(sequence.len());
    let total = sequence.len();
    for (k, record) in sequence.scans.iter().enumerate() {
        let scan = record.load(args.synth_timestamps)?;
        let res = pipeline.process_frame(&scan)?;
        if res.degenerate {
            eprintln!(
                "frame {k}/{total}: DEGENERATE (all {} registrations aborted), dead-reckoning",
                res.registrations_aborted
            );
        } else {
            eprintln!(
                "frame {k}/{total}: constraints {}, aborted {}, keyframes {}, chi2 {:.3e}",
                res.constraints_added,
                res.registrations_aborted,
                pipeline.keyframes().len(),
                res.chi2
            );
        }
        frames.push(FrameDiagnostics {
            frame: k as u64,
            constraints_added: res.constraints_added,
            registrations_aborted: res.registrations_aborted,
            degenerate: res.degenerate,
            keyframe_inserted: res.keyframe_inserted,
            chi2: res.chi2,
        });
    }

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let trajectory = pipeline.trajectory();
    fs::write(args.out.join("trajectory.txt"), write_trajectory(&trajectory))?;
    let report = RunReport {
        config: *pipeline.config(),
        effective_gamma: pipeline.config().effective_gamma(),
        seed: None,
        frames,
    };
    fs::write(args.out.join("report.json"), report.to_json())?;
    eprintln!(
        "wrote {} poses to {}",
        trajectory.len(),
        args.out.join("trajectory.txt").display()
    );
    Ok(())
}

/// Scenario: short acceleration ramp, cruise, one turn segment in the
/// middle unless --straight, cruise to the end.
fn build_trajectory(args: &SimulateArgs) -> ScriptedTrajectory {
    let start = Pose::from_translation(Vector3::new(0.0, 0.0, 1.7));
    let mut traj = ScriptedTrajectory::new(start, args.dt);
    let ramp = 10.min(args.frames.saturating_sub(1));
    for r in 0..ramp {
        let fraction = (r + 1) as f64 / ramp as f64;
        traj = traj.segment(1, args.speed * fraction, 0.0);
    }
    let remaining = args.frames.saturating_sub(1 + ramp);
    if args.straight {
        traj = traj.segment(remaining, args.speed, 0.0);
    } else {
        let first = remaining * 2 / 5;
        let turn = remaining / 4;
        let last = remaining - first - turn;
        traj = traj
            .segment(first, args.speed, 0.0)
            .segment(turn, args.speed, args.turn_rate.to_radians())
            .segment(last, args.speed, 0.0);
    }
    traj.with_pose_jitter(
        args.jitter_deg.to_radians(),
        args.jitter_z,
        args.seed.wrapping_add(0x5eed),
    )
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    if args.frames == 0 {
        bail!("--frames must be positive");
    }
    let trajectory = build_trajectory(&args);
    let world = World::scattered_along(&trajectory.positions(), args.seed);
    let sensor = SensorParams {
        rays: args.rays,
        max_range: args.max_range,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
        with_timestamps: args.with_timestamps,
    };
    let sequence = generate_sequence(&world, &trajectory, &sensor);

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    for (k, record) in sequence.scans.iter().enumerate() {
        let ScanRecord::Payload(scan) = record else {
            unreachable!("generated sequences hold payloads")
        };
        let path = args.out.join(format!("scan_{k:06}.csv"));
        fs::write(&path, write_scan_csv(scan))?;
    }
    let gt = sequence.ground_truth.as_ref().expect("simulator emits ground truth");
    fs::write(args.out.join("poses.txt"), write_trajectory(gt))?;
    eprintln!(
        "wrote {} scans and poses.txt to {}",
        sequence.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let est = scanweave_core::io::read_trajectory(
        &fs::read_to_string(&args.estimate)
            .with_context(|| format!("reading {}", args.estimate.display()))?,
    )?;
    let gt = scanweave_core::io::read_trajectory(
        &fs::read_to_string(&args.ground_truth)
            .with_context(|| format!("reading {}", args.ground_truth.display()))?,
    )?;
    let lengths = if args.lengths.is_empty() {
        desk_lengths()
    } else {
        args.lengths.clone()
    };
    let report = rte(&est, &gt, &lengths, args.rte_step)?;
    if !report.evaluated {
        eprintln!("warning: trajectory shorter than every requested segment length");
    }
    print!("{}", report.table());
    fs::write(&args.out, report.to_json())?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}
