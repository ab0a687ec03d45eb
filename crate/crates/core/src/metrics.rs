//! Relative translational error over fixed segment lengths, following the
//! KITTI odometry benchmark semantics: for every start frame and segment
//! length, compare the relative pose over the segment between estimate
//! and ground truth, normalize by the segment length, and average.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::Pose;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectory lengths differ: estimate {estimate}, ground truth {ground_truth}")]
    LengthMismatch { estimate: usize, ground_truth: usize },
    #[error("empty trajectory")]
    Empty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthError {
    pub length: f64,
    /// Mean translational drift over segments of this length, percent.
    pub translational_pct: f64,
    /// Mean rotational drift, degrees per meter.
    pub rotational_deg_per_m: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RteReport {
    pub per_length: Vec<LengthError>,
    /// Mean over all evaluated (start, length) segments, percent.
    pub overall_pct: f64,
    pub overall_rotational_deg_per_m: f64,
    pub total_segments: usize,
    /// False when the trajectory is too short for every requested length.
    pub evaluated: bool,
}

impl RteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table, one row per segment length plus the average.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("length_m  trans_err_pct  rot_err_deg_per_m  segments\n");
        for l in &self.per_length {
            out.push_str(&format!(
                "{:>8.1}  {:>13.4}  {:>17.6}  {:>8}\n",
                l.length, l.translational_pct, l.rotational_deg_per_m, l.segments
            ));
        }
        out.push_str(&format!(
            "{:>8}  {:>13.4}  {:>17.6}  {:>8}\n",
            "avg", self.overall_pct, self.overall_rotational_deg_per_m, self.total_segments
        ));
        out
    }
}

/// Cumulative path length along the trajectory, one entry per pose.
fn path_distances(poses: &[Pose]) -> Vec<f64> {
    let mut dist = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    dist.push(0.0);
    for w in poses.windows(2) {
        acc += (w[1].translation() - w[0].translation()).norm();
        dist.push(acc);
    }
    dist
}

/// First frame at least `length` meters (along the ground-truth path)
/// past `start`.
fn segment_end(dist: &[f64], start: usize, length: f64) -> Option<usize> {
    dist[start..]
        .iter()
        .position(|d| d - dist[start] >= length)
        .map(|off| start + off)
        .filter(|&j| j > start)
}

/// Segment-wise relative error of `estimate` against `ground_truth` for
/// the given segment lengths; start frames advance by `step`.
pub fn rte(
    estimate: &[Pose],
    ground_truth: &[Pose],
    lengths: &[f64],
    step: usize,
) -> Result<RteReport, MetricsError> {
    if estimate.len() != ground_truth.len() {
        return Err(MetricsError::LengthMismatch {
            estimate: estimate.len(),
            ground_truth: ground_truth.len(),
        });
    }
    if estimate.is_empty() {
        return Err(MetricsError::Empty);
    }
    let step = step.max(1);
    let dist = path_distances(ground_truth);

    let mut per_length = Vec::with_capacity(lengths.len());
    let mut total_t = 0.0;
    let mut total_r = 0.0;
    let mut total_n = 0usize;
    for &length in lengths {
        let mut sum_t = 0.0;
        let mut sum_r = 0.0;
        let mut n = 0usize;
        let mut start = 0;
        while start < estimate.len() {
            if let Some(end) = segment_end(&dist, start, length) {
                let delta_gt = ground_truth[start].inverse().compose(&ground_truth[end]);
                let delta_est = estimate[start].inverse().compose(&estimate[end]);
                let err = delta_est.inverse().compose(&delta_gt);
                sum_t += err.translation().norm() / length;
                sum_r += err.rotation_angle() / length;
                n += 1;
            }
            start += step;
        }
        if n > 0 {
            per_length.push(LengthError {
                length,
                translational_pct: sum_t / n as f64 * 100.0,
                rotational_deg_per_m: (sum_r / n as f64).to_degrees(),
                segments: n,
            });
            total_t += sum_t;
            total_r += sum_r;
            total_n += n;
        }
    }
    Ok(RteReport {
        per_length,
        overall_pct: if total_n > 0 {
            total_t / total_n as f64 * 100.0
        } else {
            0.0
        },
        overall_rotational_deg_per_m: if total_n > 0 {
            (total_r / total_n as f64).to_degrees()
        } else {
            0.0
        },
        total_segments: total_n,
        evaluated: total_n > 0,
    })
}

/// Standard KITTI segment lengths.
pub fn kitti_lengths() -> Vec<f64> {
    (1..=8).map(|k| k as f64 * 100.0).collect()
}

/// Desk-scale lengths used for synthetic sequences.
pub fn desk_lengths() -> Vec<f64> {
    (1..=8).map(|k| k as f64 * 10.0).collect()
}
