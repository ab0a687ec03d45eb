//! Per-frame odometry orchestration: constant-motion prediction, the
//! multi-keyframe registration fan-out, graph update plus smoothing, and
//! keyframe management.

use nalgebra::Matrix6;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Constraint, GraphError, NodeId, PoseGraph};
use crate::icp::{icp, IcpConfig, IcpOutcome};
use crate::pointcloud::{preprocess, DownsampledScan, RawScan};
use crate::se3::Pose;
use crate::spatial::SpatialIndex;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {frame}: scan produced an empty keyframe cloud")]
    EmptyScan { frame: u64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// All tunables of the pipeline. Defaults are the reference values:
/// 0.5 m / 1.5 m double voxel sizes, 3 m search radius, tau = 1/3 m,
/// 1e-5 convergence, 200 correspondence floor, kappa = 3 m keyframe
/// spacing, gamma = one third of the sensor range, 15 LM iterations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub v_map: f64,
    pub v_icp: f64,
    pub d_max: f64,
    pub tau: f64,
    pub conv_eps: f64,
    pub max_icp_iters: usize,
    pub min_corrs: usize,
    pub kappa: f64,
    /// Keyframe eviction distance; `None` derives max_lidar_range / 3.
    pub gamma: Option<f64>,
    pub lm_iters: usize,
    pub max_lidar_range: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            v_map: 0.5,
            v_icp: 1.5,
            d_max: 3.0,
            tau: 1.0 / 3.0,
            conv_eps: 1e-5,
            max_icp_iters: 100,
            min_corrs: 200,
            kappa: 3.0,
            gamma: None,
            lm_iters: 15,
            max_lidar_range: 100.0,
        }
    }
}

impl PipelineConfig {
    pub fn effective_gamma(&self) -> f64 {
        self.gamma.unwrap_or(self.max_lidar_range / 3.0)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.v_map.is_nan() || self.v_map <= 0.0 {
            return Err(PipelineError::InvalidConfig("v_map must be positive".into()));
        }
        if self.v_icp < self.v_map {
            return Err(PipelineError::InvalidConfig(format!(
                "v_icp ({}) must not be smaller than v_map ({})",
                self.v_icp, self.v_map
            )));
        }
        for (name, v) in [
            ("d_max", self.d_max),
            ("tau", self.tau),
            ("conv_eps", self.conv_eps),
            ("kappa", self.kappa),
            ("max_lidar_range", self.max_lidar_range),
            ("gamma", self.effective_gamma()),
        ] {
            if v.is_nan() || v <= 0.0 {
                return Err(PipelineError::InvalidConfig(format!(
                    "{name} must be positive (got {v})"
                )));
            }
        }
        Ok(())
    }

    pub fn icp_config(&self) -> IcpConfig {
        IcpConfig {
            d_max: self.d_max,
            tau: self.tau,
            conv_eps: self.conv_eps,
            max_iterations: self.max_icp_iters,
            min_correspondences: self.min_corrs,
        }
    }
}

/// Retained scan used as a registration target: the keyframe-density
/// cloud with a prebuilt index over exactly that cloud.
pub struct Keyframe {
    pub node: NodeId,
    pub time_index: u64,
    pub cloud: DownsampledScan,
    pub index: SpatialIndex,
}

/// One successful keyframe registration, ready to enter the graph.
#[derive(Debug, Clone)]
pub struct KeyframeMeasurement {
    pub keyframe_node: NodeId,
    /// Pose of the current scan in the keyframe frame.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FrameResult {
    pub node: NodeId,
    /// Smoothed pose of the current scan.
    pub pose: Pose,
    pub constraints_added: usize,
    pub registrations_aborted: usize,
    /// True when every registration aborted and the frame fell back to
    /// the dead-reckoned prediction.
    pub degenerate: bool,
    pub keyframe_inserted: bool,
    pub evicted: Vec<NodeId>,
    pub chi2: f64,
}

/// Motion at the last time step from the two most recent poses:
/// `x_prev2^-1 * x_prev`.
pub fn predict_motion(x_prev: &Pose, x_prev2: &Pose) -> Pose {
    x_prev2.inverse().compose(x_prev)
}

/// Constant-motion pose prediction: `x_prev * motion`.
pub fn predict_pose(x_prev: &Pose, motion: &Pose) -> Pose {
    x_prev.compose(motion)
}

pub struct OdometryPipeline {
    config: PipelineConfig,
    graph: PoseGraph,
    keyframes: Vec<Keyframe>,
    frame_nodes: Vec<NodeId>,
}

impl OdometryPipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(OdometryPipeline {
            config,
            graph: PoseGraph::new(),
            keyframes: Vec::new(),
            frame_nodes: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn frame_count(&self) -> usize {
        self.frame_nodes.len()
    }

    /// Current per-frame poses; already-smoothed values for nodes still
    /// in the window, finalized values for fixed nodes.
    pub fn trajectory(&self) -> Vec<Pose> {
        self.frame_nodes
            .iter()
            .map(|id| self.graph.node(*id).expect("frame nodes stay in graph").pose)
            .collect()
    }

    fn pose_of(&self, id: NodeId) -> Pose {
        self.graph.node(id).expect("node exists").pose
    }

    /// Registers the current registration cloud against every keyframe
    /// independently. Registrations run in parallel; results come back in
    /// keyframe order so downstream processing stays deterministic.
    pub fn register_to_keyframes(
        keyframes: &[Keyframe],
        keyframe_poses: &[Pose],
        registration_cloud: &DownsampledScan,
        x_hat: &Pose,
        config: &IcpConfig,
    ) -> (Vec<KeyframeMeasurement>, usize) {
        let attempts: Vec<Option<KeyframeMeasurement>> = keyframes
            .par_iter()
            .zip(keyframe_poses.par_iter())
            .map(|(kf, kf_pose)| {
                // Initial guess expressed in the keyframe frame.
                let x_rel = kf_pose.inverse().compose(x_hat);
                let source: Vec<_> = registration_cloud
                    .points
                    .iter()
                    .map(|p| x_rel.transform_point(p))
                    .collect();
                match icp(&source, &kf.index, config) {
                    Ok(IcpOutcome::Registered(res)) => Some(KeyframeMeasurement {
                        keyframe_node: kf.node,
                        measurement: res.delta.compose(&x_rel),
                        information: res.information,
                        iterations: res.iterations,
                        converged: res.converged,
                    }),
                    // Too little overlap or degenerate geometry: the
                    // constraint is discarded.
                    Ok(IcpOutcome::Aborted { .. }) | Err(_) => None,
                }
            })
            .collect();
        let aborted = attempts.iter().filter(|a| a.is_none()).count();
        (attempts.into_iter().flatten().collect(), aborted)
    }

    pub fn process_frame(&mut self, scan: &RawScan) -> Result<FrameResult, PipelineError> {
        let frame_idx = self.frame_nodes.len() as u64;
        let node = NodeId(frame_idx);

        // Deskew with the last inter-frame motion; identity until two
        // poses exist.
        let motion = match self.frame_nodes.len() {
            0 | 1 => Pose::identity(),
            n => predict_motion(
                &self.pose_of(self.frame_nodes[n - 1]),
                &self.pose_of(self.frame_nodes[n - 2]),
            ),
        };
        let (keyframe_cloud, registration_cloud) =
            preprocess(scan, &motion, self.config.v_map, self.config.v_icp);

        if self.frame_nodes.is_empty() {
            // Bootstrap: the first scan becomes node 0 at the origin and
            // the first keyframe; the oldest node anchors the gauge.
            let index = SpatialIndex::build(&keyframe_cloud.points)
                .map_err(|_| PipelineError::EmptyScan { frame: frame_idx })?;
            self.graph.add_node(node, Pose::identity())?;
            self.graph.fix_node(node)?;
            self.keyframes.push(Keyframe {
                node,
                time_index: frame_idx,
                cloud: keyframe_cloud,
                index,
            });
            self.frame_nodes.push(node);
            return Ok(FrameResult {
                node,
                pose: Pose::identity(),
                constraints_added: 0,
                registrations_aborted: 0,
                degenerate: false,
                keyframe_inserted: true,
                evicted: Vec::new(),
                chi2: 0.0,
            });
        }

        let x_prev = self.pose_of(*self.frame_nodes.last().unwrap());
        let x_hat = predict_pose(&x_prev, &motion);

        let keyframe_poses: Vec<Pose> = self.keyframes.iter().map(|kf| self.pose_of(kf.node)).collect();
        let (measurements, aborted) = Self::register_to_keyframes(
            &self.keyframes,
            &keyframe_poses,
            &registration_cloud,
            &x_hat,
            &self.config.icp_config(),
        );

        if measurements.is_empty() {
            // Every registration aborted: dead-reckon the prediction and
            // leave keyframes untouched.
            self.graph.add_node(node, x_hat)?;
            self.frame_nodes.push(node);
            return Ok(FrameResult {
                node,
                pose: x_hat,
                constraints_added: 0,
                registrations_aborted: aborted,
                degenerate: true,
                keyframe_inserted: false,
                evicted: Vec::new(),
                chi2: self.graph.chi2(),
            });
        }

        // Initial guess from the newest keyframe that registered:
        // measurement mapped back to the global frame.
        let newest = measurements.last().expect("nonempty");
        let init = newest.measurement.compose(&self.pose_of(newest.keyframe_node));
        self.graph.add_node(node, init)?;
        let constraints_added = measurements.len();
        for m in &measurements {
            self.graph.add_constraint(Constraint {
                from: node,
                to: m.keyframe_node,
                measurement: m.measurement,
                information: m.information,
            })?;
        }

        self.graph.optimize(self.config.lm_iters)?;
        let pose = self.pose_of(node);

        let (keyframe_inserted, evicted) = self.manage_keyframes(node, keyframe_cloud, frame_idx)?;

        self.frame_nodes.push(node);
        Ok(FrameResult {
            node,
            pose,
            constraints_added,
            registrations_aborted: aborted,
            degenerate: false,
            keyframe_inserted,
            evicted,
            chi2: self.graph.chi2(),
        })
    }

    /// Keyframe insertion and eviction after the optimized configuration
    /// has been written back. Inserts the current frame when the platform
    /// traveled more than kappa since the newest keyframe; evicts (and
    /// fixes) everything farther than gamma from the current pose.
    /// Non-keyframe nodes beyond gamma are fixed as well.
    fn manage_keyframes(
        &mut self,
        current: NodeId,
        keyframe_cloud: DownsampledScan,
        frame_idx: u64,
    ) -> Result<(bool, Vec<NodeId>), PipelineError> {
        let x_t = self.pose_of(current);
        let newest_kf = self.keyframes.last().expect("bootstrap guarantees a keyframe");
        let dist_to_newest =
            (x_t.translation() - self.pose_of(newest_kf.node).translation()).norm();

        let mut inserted = false;
        if dist_to_newest > self.config.kappa {
            match SpatialIndex::build(&keyframe_cloud.points) {
                Ok(index) => {
                    self.keyframes.push(Keyframe {
                        node: current,
                        time_index: frame_idx,
                        cloud: keyframe_cloud,
                        index,
                    });
                    inserted = true;
                }
                // An empty cloud cannot serve as a registration target.
                Err(_) => inserted = false,
            }
        }

        let gamma = self.config.effective_gamma();
        let mut evicted = Vec::new();
        let graph = &mut self.graph;
        let newest_node = self.keyframes.last().unwrap().node;
        let mut keep = Vec::with_capacity(self.keyframes.len());
        for kf in self.keyframes.drain(..) {
            let d = (graph.node(kf.node).unwrap().pose.translation() - x_t.translation()).norm();
            // The newest keyframe always survives so registration keeps a
            // target even under extreme configurations.
            if d > gamma && kf.node != newest_node {
                graph.fix_node(kf.node)?;
                evicted.push(kf.node);
            } else {
                keep.push(kf);
            }
        }
        self.keyframes = keep;

        // Non-keyframe nodes that left the window become fixed; their
        // poses are final from here on.
        let to_fix: Vec<NodeId> = self
            .graph
            .nodes()
            .filter(|n| !n.fixed && (n.pose.translation() - x_t.translation()).norm() > gamma)
            .map(|n| n.id)
            .collect();
        for id in to_fix {
            self.graph.fix_node(id)?;
        }
        self.graph.drop_fixed_constraints();
        Ok((inserted, evicted))
    }
}
