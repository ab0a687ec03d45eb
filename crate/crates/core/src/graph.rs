//! Sliding-window pose graph: nodes, relative-pose constraints and the
//! Levenberg-Marquardt smoother.
//!
//! Nodes that left the window are fixed; they keep acting as gauge
//! anchors for constraints into the active window but are never touched
//! by the optimizer again.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix6, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

use crate::se3::{adjoint, se3_right_jacobian_inv, Pose, Twist};

/// Damping at which an unsolvable system is declared unrecoverable.
const LAMBDA_CEILING: f64 = 1e8;
const LAMBDA_INITIAL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("constraint endpoints must differ (got {0} twice)")]
    SelfConstraint(NodeId),
    #[error("node {0} cannot be removed: {reason}", reason = .1)]
    RemovalRejected(NodeId, &'static str),
    #[error("optimization requires at least one fixed node as gauge")]
    NoFixedNode,
    #[error("damped system still singular at lambda {0:.3e}; graph left unchanged")]
    UnrecoverableGeometry(f64),
    #[error("graph dump parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Monotonically increasing node identifier; one per processed scan, in
/// time order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub id: NodeId,
    pub pose: Pose,
    pub fixed: bool,
}

/// Relative-pose measurement: the pose of `from` expressed in the frame
/// of `to`, weighted by a symmetric information matrix.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub from: NodeId,
    pub to: NodeId,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    nodes: BTreeMap<NodeId, GraphNode>,
    constraints: Vec<Constraint>,
}

/// Outcome bookkeeping of one optimize() call.
#[derive(Debug, Clone)]
pub struct OptimizeStats {
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub accepted: usize,
    pub rejected: usize,
    /// Objective value after each accepted step, starting at the initial
    /// value; non-increasing by construction.
    pub chi2_history: Vec<f64>,
}

/// Constraint error of a relative-pose measurement:
/// `log(z^-1 * (x_j^-1 * x_i))`; zero iff the measurement exactly
/// explains the pose pair.
pub fn error(x_i: &Pose, x_j: &Pose, z_ij: &Pose) -> Twist {
    z_ij.inverse()
        .compose(&x_j.inverse().compose(x_i))
        .log_unchecked()
}

impl PoseGraph {
    pub fn new() -> Self {
        PoseGraph::default()
    }

    pub fn node(&self, id: NodeId) -> Option<&GraphNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn active_node_count(&self) -> usize {
        self.nodes.values().filter(|n| !n.fixed).count()
    }

    pub fn add_node(&mut self, id: NodeId, pose: Pose) -> Result<(), GraphError> {
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateNode(id));
        }
        self.nodes.insert(id, GraphNode { id, pose, fixed: false });
        Ok(())
    }

    pub fn fix_node(&mut self, id: NodeId) -> Result<(), GraphError> {
        self.nodes
            .get_mut(&id)
            .map(|n| n.fixed = true)
            .ok_or(GraphError::UnknownNode(id))
    }

    pub fn set_pose(&mut self, id: NodeId, pose: Pose) -> Result<(), GraphError> {
        self.nodes
            .get_mut(&id)
            .map(|n| n.pose = pose)
            .ok_or(GraphError::UnknownNode(id))
    }

    pub fn add_constraint(&mut self, c: Constraint) -> Result<(), GraphError> {
        if c.from == c.to {
            return Err(GraphError::SelfConstraint(c.from));
        }
        if !self.nodes.contains_key(&c.from) {
            return Err(GraphError::UnknownNode(c.from));
        }
        if !self.nodes.contains_key(&c.to) {
            return Err(GraphError::UnknownNode(c.to));
        }
        debug_assert!((c.information - c.information.transpose()).norm() < 1e-9);
        self.constraints.push(c);
        Ok(())
    }

    /// Removes a fixed node that no active-side constraint references.
    /// Constraints between the node and other fixed nodes are dropped
    /// with it; anything else rejects the removal.
    pub fn remove_node(&mut self, id: NodeId) -> Result<(), GraphError> {
        let node = self.nodes.get(&id).ok_or(GraphError::UnknownNode(id))?;
        if !node.fixed {
            return Err(GraphError::RemovalRejected(id, "node is active"));
        }
        for c in &self.constraints {
            let other = if c.from == id {
                c.to
            } else if c.to == id {
                c.from
            } else {
                continue;
            };
            if !self.nodes[&other].fixed {
                return Err(GraphError::RemovalRejected(
                    id,
                    "still referenced by an active-side constraint",
                ));
            }
        }
        self.constraints.retain(|c| c.from != id && c.to != id);
        self.nodes.remove(&id);
        Ok(())
    }

    /// Drops constraints whose both endpoints are fixed; they contribute
    /// only a constant to the objective.
    pub fn drop_fixed_constraints(&mut self) {
        let nodes = &self.nodes;
        self.constraints
            .retain(|c| !(nodes[&c.from].fixed && nodes[&c.to].fixed));
    }

    /// Objective value: sum of `e^T Omega e` over all constraints.
    pub fn chi2(&self) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let e = error(
                    &self.nodes[&c.from].pose,
                    &self.nodes[&c.to].pose,
                    &c.measurement,
                )
                .as_vector();
                (e.transpose() * c.information * e)[0]
            })
            .sum()
    }

    /// Levenberg-Marquardt over the active nodes: damped normal equations
    /// from analytic error Jacobians, steps accepted only when chi2
    /// decreases. The iteration budget counts accepted and rejected
    /// solves alike. Fixed poses are never written.
    pub fn optimize(&mut self, iterations: usize) -> Result<OptimizeStats, GraphError> {
        if !self.nodes.values().any(|n| n.fixed) {
            return Err(GraphError::NoFixedNode);
        }
        // Column offsets for active nodes, in id order.
        let active: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| !n.fixed)
            .map(|n| n.id)
            .collect();
        let offsets: BTreeMap<NodeId, usize> = active
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, i * 6))
            .collect();
        let dim = active.len() * 6;

        let snapshot: Vec<(NodeId, Pose)> =
            active.iter().map(|id| (*id, self.nodes[id].pose)).collect();
        let initial_chi2 = self.chi2();
        if dim == 0 {
            return Ok(OptimizeStats {
                initial_chi2,
                final_chi2: initial_chi2,
                accepted: 0,
                rejected: 0,
                chi2_history: vec![initial_chi2],
            });
        }

        let mut lambda = LAMBDA_INITIAL;
        let mut chi2 = initial_chi2;
        let mut accepted = 0;
        let mut rejected = 0;
        let mut chi2_history = vec![initial_chi2];
        for _ in 0..iterations {
            let (h, g) = self.assemble(&offsets, dim);
            let mut damped = h.clone();
            for k in 0..dim {
                damped[(k, k)] += lambda;
            }
            let Some(chol) = damped.cholesky() else {
                // PSD + lambda I should always factor; escalate, give up
                // past the ceiling with the graph restored.
                if lambda >= LAMBDA_CEILING {
                    for (id, pose) in &snapshot {
                        self.nodes.get_mut(id).unwrap().pose = *pose;
                    }
                    return Err(GraphError::UnrecoverableGeometry(lambda));
                }
                lambda *= 10.0;
                rejected += 1;
                continue;
            };
            let delta = chol.solve(&(-&g));

            let before: Vec<Pose> = active.iter().map(|id| self.nodes[id].pose).collect();
            for (i, id) in active.iter().enumerate() {
                let xi = Twist::from_vector(&Vector6::from_iterator(
                    (0..6).map(|k| delta[i * 6 + k]),
                ));
                let node = self.nodes.get_mut(id).unwrap();
                node.pose = node.pose.compose(&Pose::exp(&xi));
            }
            let new_chi2 = self.chi2();
            if new_chi2 < chi2 {
                chi2 = new_chi2;
                lambda /= 10.0;
                accepted += 1;
                chi2_history.push(chi2);
            } else {
                for (i, id) in active.iter().enumerate() {
                    self.nodes.get_mut(id).unwrap().pose = before[i];
                }
                lambda *= 10.0;
                rejected += 1;
            }
        }
        Ok(OptimizeStats {
            initial_chi2,
            final_chi2: chi2,
            accepted,
            rejected,
            chi2_history,
        })
    }

    fn assemble(
        &self,
        offsets: &BTreeMap<NodeId, usize>,
        dim: usize,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for c in &self.constraints {
            let from = &self.nodes[&c.from];
            let to = &self.nodes[&c.to];
            if from.fixed && to.fixed {
                continue;
            }
            let e = error(&from.pose, &to.pose, &c.measurement);
            let jr_inv = se3_right_jacobian_inv(&e);
            let e = e.as_vector();
            // d e / d delta_from under x_from <- x_from * exp(delta).
            let jac_from = jr_inv;
            // d e / d delta_to: the perturbation is conjugated through
            // x_from^-1 * x_to before it reaches the error.
            let jac_to = -jr_inv * adjoint(&from.pose.inverse().compose(&to.pose));

            let mut add_block = |row: usize, col: usize, m: &Matrix6<f64>| {
                for r in 0..6 {
                    for cc in 0..6 {
                        h[(row + r, col + cc)] += m[(r, cc)];
                    }
                }
            };
            if let Some(&oi) = offsets.get(&c.from) {
                add_block(oi, oi, &(jac_from.transpose() * c.information * jac_from));
                let gi = jac_from.transpose() * c.information * e;
                for r in 0..6 {
                    g[oi + r] += gi[r];
                }
            }
            if let Some(&oj) = offsets.get(&c.to) {
                add_block(oj, oj, &(jac_to.transpose() * c.information * jac_to));
                let gj = jac_to.transpose() * c.information * e;
                for r in 0..6 {
                    g[oj + r] += gj[r];
                }
            }
            if let (Some(&oi), Some(&oj)) = (offsets.get(&c.from), offsets.get(&c.to)) {
                let hij = jac_from.transpose() * c.information * jac_to;
                add_block(oi, oj, &hij);
                add_block(oj, oi, &hij.transpose());
            }
        }
        (h, g)
    }

    /// Text dump, one line per node and per constraint. Quaternions are
    /// Hamilton, w-last; the information matrix is written as its 21
    /// upper-triangular entries in row-major order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for n in self.nodes.values() {
            let t = n.pose.translation();
            let q = n.pose.rotation_quaternion();
            out.push_str(&format!(
                "NODE {} {} {} {} {} {} {} {} {}\n",
                n.id,
                t.x,
                t.y,
                t.z,
                q.i,
                q.j,
                q.k,
                q.w,
                if n.fixed { 1 } else { 0 }
            ));
        }
        for c in &self.constraints {
            let t = c.measurement.translation();
            let q = c.measurement.rotation_quaternion();
            out.push_str(&format!(
                "EDGE {} {} {} {} {} {} {} {} {}",
                c.from, c.to, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            ));
            for r in 0..6 {
                for cc in r..6 {
                    out.push_str(&format!(" {}", c.information[(r, cc)]));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<PoseGraph, GraphError> {
        let mut graph = PoseGraph::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fail = |message: &str| GraphError::Parse {
                line: lineno + 1,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let nums = |range: std::ops::Range<usize>| -> Result<Vec<f64>, GraphError> {
                fields[range]
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|e| fail(&e.to_string())))
                    .collect()
            };
            match fields[0] {
                "NODE" => {
                    if fields.len() != 10 {
                        return Err(fail("NODE expects 9 fields"));
                    }
                    let id = NodeId(fields[1].parse().map_err(|_| fail("bad node id"))?);
                    let v = nums(2..9)?;
                    let pose = pose_from_tq(&v);
                    graph.add_node(id, pose)?;
                    if fields[9] == "1" {
                        graph.fix_node(id)?;
                    }
                }
                "EDGE" => {
                    if fields.len() != 31 {
                        return Err(fail("EDGE expects 30 fields"));
                    }
                    let from = NodeId(fields[1].parse().map_err(|_| fail("bad from id"))?);
                    let to = NodeId(fields[2].parse().map_err(|_| fail("bad to id"))?);
                    let v = nums(3..10)?;
                    let measurement = pose_from_tq(&v);
                    let upper = nums(10..31)?;
                    let mut information = Matrix6::zeros();
                    let mut k = 0;
                    for r in 0..6 {
                        for cc in r..6 {
                            information[(r, cc)] = upper[k];
                            information[(cc, r)] = upper[k];
                            k += 1;
                        }
                    }
                    graph.add_constraint(Constraint {
                        from,
                        to,
                        measurement,
                        information,
                    })?;
                }
                other => {
                    return Err(fail(&format!("unknown record '{other}'")));
                }
            }
        }
        Ok(graph)
    }
}

fn pose_from_tq(v: &[f64]) -> Pose {
    let t = Vector3::new(v[0], v[1], v[2]);
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]));
    Pose::from_quaternion_translation(&q, t)
}
