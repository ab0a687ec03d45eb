//! Python bindings: the pose type, voxel downsampling, pairwise
//! registration, the odometry pipeline, trajectory evaluation and a small
//! synthetic-sequence generator.

use nalgebra::Vector3;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use scanweave_core::icp::{icp, IcpConfig, IcpOutcome};
use scanweave_core::io::ScanRecord;
use scanweave_core::metrics;
use scanweave_core::pipeline::{OdometryPipeline, PipelineConfig as CoreConfig};
use scanweave_core::pointcloud::{voxel_downsample as core_downsample, RawScan};
use scanweave_core::se3::{Pose as CorePose, Twist};
use scanweave_core::sim::{generate_sequence, ScriptedTrajectory, SensorParams, World};
use scanweave_core::spatial::SpatialIndex;

type Point = (f64, f64, f64);
/// `(overall_pct, rotational_deg_per_m, [(length, pct, segments)])`.
type RteSummary = (f64, f64, Vec<(f64, f64, usize)>);

fn to_vectors(points: Vec<Point>) -> Vec<Vector3<f64>> {
    points
        .into_iter()
        .map(|(x, y, z)| Vector3::new(x, y, z))
        .collect()
}

fn to_tuples(points: &[Vector3<f64>]) -> Vec<Point> {
    points.iter().map(|p| (p.x, p.y, p.z)).collect()
}

fn value_err(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

/// Rigid transform in SE(3).
#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone)]
struct PyPose {
    inner: CorePose,
}

#[pymethods]
impl PyPose {
    #[staticmethod]
    fn identity() -> Self {
        PyPose {
            inner: CorePose::identity(),
        }
    }

    /// Builds from a twist: translational part `rho`, rotational part
    /// `phi` (axis * angle).
    #[staticmethod]
    fn exp(rho: Point, phi: Point) -> Self {
        let xi = Twist::new(
            Vector3::new(rho.0, rho.1, rho.2),
            Vector3::new(phi.0, phi.1, phi.2),
        );
        PyPose {
            inner: CorePose::exp(&xi),
        }
    }

    /// Twist of the pose as `(rho, phi)`. Raises for rotations at pi.
    fn log(&self) -> PyResult<(Point, Point)> {
        let xi = self.inner.log().map_err(value_err)?;
        Ok(((xi.rho.x, xi.rho.y, xi.rho.z), (xi.phi.x, xi.phi.y, xi.phi.z)))
    }

    fn compose(&self, other: &PyPose) -> Self {
        PyPose {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        PyPose {
            inner: self.inner.inverse(),
        }
    }

    fn transform_point(&self, point: Point) -> Point {
        let q = self
            .inner
            .transform_point(&Vector3::new(point.0, point.1, point.2));
        (q.x, q.y, q.z)
    }

    fn interpolate(&self, s: f64) -> Self {
        PyPose {
            inner: self.inner.interpolate(s),
        }
    }

    fn translation(&self) -> Point {
        let t = self.inner.translation();
        (t.x, t.y, t.z)
    }

    fn rotation_angle(&self) -> f64 {
        self.inner.rotation_angle()
    }

    /// Row-major 3x4 `[R|t]` matrix as 12 floats.
    fn matrix(&self) -> [f64; 12] {
        let r = self.inner.rotation();
        let t = self.inner.translation();
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    fn __repr__(&self) -> String {
        let t = self.inner.translation();
        format!(
            "Pose(t=({:.4}, {:.4}, {:.4}), angle={:.4} rad)",
            t.x,
            t.y,
            t.z,
            self.inner.rotation_angle()
        )
    }
}

/// Pipeline tunables with the reference defaults.
#[pyclass(name = "PipelineConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (
        v_map = 0.5, v_icp = 1.5, d_max = 3.0, tau = 1.0 / 3.0,
        conv_eps = 1e-5, max_icp_iters = 100, min_corrs = 200,
        kappa = 3.0, gamma = None, lm_iters = 15, max_lidar_range = 100.0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        v_map: f64,
        v_icp: f64,
        d_max: f64,
        tau: f64,
        conv_eps: f64,
        max_icp_iters: usize,
        min_corrs: usize,
        kappa: f64,
        gamma: Option<f64>,
        lm_iters: usize,
        max_lidar_range: f64,
    ) -> PyResult<Self> {
        let inner = CoreConfig {
            v_map,
            v_icp,
            d_max,
            tau,
            conv_eps,
            max_icp_iters,
            min_corrs,
            kappa,
            gamma,
            lm_iters,
            max_lidar_range,
        };
        inner.validate().map_err(value_err)?;
        Ok(PyConfig { inner })
    }

    #[getter]
    fn effective_gamma(&self) -> f64 {
        self.inner.effective_gamma()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Per-frame processing summary.
#[pyclass(name = "FrameResult")]
struct PyFrameResult {
    #[pyo3(get)]
    frame: u64,
    #[pyo3(get)]
    pose: PyPose,
    #[pyo3(get)]
    constraints_added: usize,
    #[pyo3(get)]
    registrations_aborted: usize,
    #[pyo3(get)]
    degenerate: bool,
    #[pyo3(get)]
    keyframe_inserted: bool,
}

/// Streaming odometry: feed scans in time order, read back the smoothed
/// trajectory.
#[pyclass(name = "Odometry")]
struct PyOdometry {
    inner: OdometryPipeline,
}

#[pymethods]
impl PyOdometry {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<PyConfig>) -> PyResult<Self> {
        let config = config.map(|c| c.inner).unwrap_or_default();
        Ok(PyOdometry {
            inner: OdometryPipeline::new(config).map_err(value_err)?,
        })
    }

    /// Processes one scan. `timestamps`, when given, are per-point sweep
    /// fractions in [0, 1] and enable deskewing.
    #[pyo3(signature = (points, timestamps = None))]
    fn process(
        &mut self,
        points: Vec<Point>,
        timestamps: Option<Vec<f64>>,
    ) -> PyResult<PyFrameResult> {
        let points = to_vectors(points);
        if let Some(ts) = &timestamps {
            if ts.len() != points.len() {
                return Err(PyValueError::new_err(format!(
                    "{} timestamps for {} points",
                    ts.len(),
                    points.len()
                )));
            }
            if ts.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(PyValueError::new_err("timestamps must lie in [0, 1]"));
            }
        }
        let scan = RawScan {
            points,
            timestamps,
            frame_time: self.inner.frame_count() as f64,
        };
        let res = self.inner.process_frame(&scan).map_err(value_err)?;
        Ok(PyFrameResult {
            frame: res.node.0,
            pose: PyPose { inner: res.pose },
            constraints_added: res.constraints_added,
            registrations_aborted: res.registrations_aborted,
            degenerate: res.degenerate,
            keyframe_inserted: res.keyframe_inserted,
        })
    }

    /// Smoothed pose per processed frame.
    fn trajectory(&self) -> Vec<PyPose> {
        self.inner
            .trajectory()
            .into_iter()
            .map(|inner| PyPose { inner })
            .collect()
    }

    #[getter]
    fn keyframe_count(&self) -> usize {
        self.inner.keyframes().len()
    }

    #[getter]
    fn frame_count(&self) -> usize {
        self.inner.frame_count()
    }
}

/// Keeps the first point of each voxel; order preserving.
#[pyfunction]
fn voxel_downsample(points: Vec<Point>, voxel_size: f64) -> PyResult<Vec<Point>> {
    if voxel_size.is_nan() || voxel_size <= 0.0 {
        return Err(PyValueError::new_err("voxel_size must be positive"));
    }
    Ok(to_tuples(&core_downsample(&to_vectors(points), voxel_size).points))
}

/// Registers `source` onto `target` with robust point-to-point ICP.
/// Returns `(pose, iterations, correspondences)` on success, `None` when
/// the correspondence gate aborts the registration.
#[pyfunction]
#[pyo3(signature = (source, target, d_max = 3.0, tau = 1.0 / 3.0,
                    conv_eps = 1e-5, max_iterations = 100, min_correspondences = 200))]
fn register(
    source: Vec<Point>,
    target: Vec<Point>,
    d_max: f64,
    tau: f64,
    conv_eps: f64,
    max_iterations: usize,
    min_correspondences: usize,
) -> PyResult<Option<(PyPose, usize, usize)>> {
    let target = to_vectors(target);
    let index = SpatialIndex::build(&target).map_err(value_err)?;
    let config = IcpConfig {
        d_max,
        tau,
        conv_eps,
        max_iterations,
        min_correspondences,
    };
    match icp(&to_vectors(source), &index, &config).map_err(value_err)? {
        IcpOutcome::Registered(res) => Ok(Some((
            PyPose { inner: res.delta },
            res.iterations,
            res.final_correspondences,
        ))),
        IcpOutcome::Aborted { .. } => Ok(None),
    }
}

/// Relative translational error of `estimate` against `ground_truth`;
/// returns `(overall_pct, rotational_deg_per_m, per_length)` with
/// `per_length` entries `(length, pct, segments)`.
#[pyfunction]
#[pyo3(signature = (estimate, ground_truth, lengths = None, step = 1))]
fn rte(
    estimate: Vec<PyPose>,
    ground_truth: Vec<PyPose>,
    lengths: Option<Vec<f64>>,
    step: usize,
) -> PyResult<RteSummary> {
    let est: Vec<CorePose> = estimate.into_iter().map(|p| p.inner).collect();
    let gt: Vec<CorePose> = ground_truth.into_iter().map(|p| p.inner).collect();
    let lengths = lengths.unwrap_or_else(metrics::desk_lengths);
    let report = metrics::rte(&est, &gt, &lengths, step).map_err(value_err)?;
    Ok((
        report.overall_pct,
        report.overall_rotational_deg_per_m,
        report
            .per_length
            .iter()
            .map(|l| (l.length, l.translational_pct, l.segments))
            .collect(),
    ))
}

/// Generates a synthetic drive; returns `(scans, ground_truth)` where
/// each scan is a list of sensor-frame points.
#[pyfunction]
#[pyo3(signature = (frames, speed = 10.0, dt = 0.1, rays = 64 * 260,
                    noise_sigma = 0.02, max_range = 100.0, seed = 1, turn = true))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    frames: usize,
    speed: f64,
    dt: f64,
    rays: usize,
    noise_sigma: f64,
    max_range: f64,
    seed: u64,
    turn: bool,
) -> PyResult<(Vec<Vec<Point>>, Vec<PyPose>)> {
    if frames == 0 {
        return Err(PyValueError::new_err("frames must be positive"));
    }
    let mut traj = ScriptedTrajectory::new(
        CorePose::from_translation(Vector3::new(0.0, 0.0, 1.7)),
        dt,
    );
    let ramp = 10.min(frames.saturating_sub(1));
    for r in 0..ramp {
        traj = traj.segment(1, speed * (r + 1) as f64 / ramp as f64, 0.0);
    }
    let remaining = frames.saturating_sub(1 + ramp);
    if turn && remaining >= 20 {
        let first = remaining * 2 / 5;
        let mid = remaining / 4;
        traj = traj
            .segment(first, speed, 0.0)
            .segment(mid, speed, 15f64.to_radians())
            .segment(remaining - first - mid, speed, 0.0);
    } else {
        traj = traj.segment(remaining, speed, 0.0);
    }
    let traj = traj.with_pose_jitter(0.7f64.to_radians(), 0.035, seed ^ 0x5eed);
    let world = World::scattered_along(&traj.positions(), seed);
    let sensor = SensorParams {
        rays,
        max_range,
        noise_sigma,
        seed,
        with_timestamps: false,
    };
    let seq = generate_sequence(&world, &traj, &sensor);
    let scans = seq
        .scans
        .iter()
        .map(|rec| match rec {
            ScanRecord::Payload(scan) => to_tuples(&scan.points),
            ScanRecord::Path(_) => unreachable!("generated sequences hold payloads"),
        })
        .collect();
    let gt = traj.poses.into_iter().map(|inner| PyPose { inner }).collect();
    Ok((scans, gt))
}

#[pymodule]
fn scanweave_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyOdometry>()?;
    m.add_class::<PyFrameResult>()?;
    m.add_function(wrap_pyfunction!(voxel_downsample, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(rte, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
