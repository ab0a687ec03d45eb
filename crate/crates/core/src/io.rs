//! Sequence ingestion and evaluation-ready output: KITTI velodyne `.bin`
//! scans, `x,y,z[,t]` CSV scans, 3x4 row-major trajectory files and the
//! per-run JSON report.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PipelineConfig;
use crate::pointcloud::RawScan;
use crate::se3::Pose;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

impl IoError {
    fn format(msg: impl Into<String>) -> Self {
        IoError::Format(msg.into())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// KITTI velodyne layout: little-endian float32 quadruples x, y, z,
/// intensity. Intensity is discarded; these scans carry no timestamps.
pub fn read_scan_kitti_bin(bytes: &[u8]) -> Result<RawScan, IoError> {
    if !bytes.len().is_multiple_of(16) {
        return Err(IoError::format(format!(
            "KITTI .bin length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i..i + 4].try_into().unwrap()) as f64;
            Vector3::new(f(0), f(4), f(8))
        })
        .collect();
    Ok(RawScan::from_points(points))
}

/// CSV scan with header `x,y,z` or `x,y,z,t`; `t` is the per-point sweep
/// fraction and must lie in [0, 1].
pub fn read_scan_csv(text: &str) -> Result<RawScan, IoError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| IoError::format("empty CSV scan"))?
        .trim();
    let with_time = match header {
        "x,y,z" => false,
        "x,y,z,t" => true,
        other => {
            return Err(IoError::format(format!(
                "unexpected CSV header '{other}' (want 'x,y,z' or 'x,y,z,t')"
            )))
        }
    };
    let mut points = Vec::new();
    let mut timestamps = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let want = if with_time { 4 } else { 3 };
        if cells.len() != want {
            return Err(IoError::format(format!(
                "line {}: expected {want} cells, got {}",
                i + 2,
                cells.len()
            )));
        }
        let parse = |s: &str| -> Result<f64, IoError> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| IoError::format(format!("line {}: bad number '{s}'", i + 2)))
        };
        points.push(Vector3::new(parse(cells[0])?, parse(cells[1])?, parse(cells[2])?));
        if with_time {
            let t = parse(cells[3])?;
            if !(0.0..=1.0).contains(&t) {
                return Err(IoError::format(format!(
                    "line {}: timestamp {t} outside [0, 1]",
                    i + 2
                )));
            }
            timestamps.push(t);
        }
    }
    Ok(RawScan {
        points,
        timestamps: with_time.then_some(timestamps),
        frame_time: 0.0,
    })
}

pub fn write_scan_csv(scan: &RawScan) -> String {
    let mut out = String::new();
    match &scan.timestamps {
        Some(ts) => {
            out.push_str("x,y,z,t\n");
            for (p, t) in scan.points.iter().zip(ts) {
                out.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.z, t));
            }
        }
        None => {
            out.push_str("x,y,z\n");
            for p in &scan.points {
                out.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
            }
        }
    }
    out
}

/// One pose per line as the row-major 3x4 `[R|t]` matrix, KITTI layout,
/// full shortest-round-trip precision.
pub fn write_trajectory(poses: &[Pose]) -> String {
    let mut out = String::new();
    for pose in poses {
        let r = pose.rotation();
        let t = pose.translation();
        let row = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ];
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_trajectory(text: &str) -> Result<Vec<Pose>, IoError> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let vals =
            vals.map_err(|e| IoError::format(format!("trajectory line {}: {e}", i + 1)))?;
        if vals.len() != 12 {
            return Err(IoError::format(format!(
                "trajectory line {}: expected 12 values, got {}",
                i + 1,
                vals.len()
            )));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        poses.push(Pose::from_parts(rotation, translation));
    }
    Ok(poses)
}

/// A scan either on disk or already in memory.
#[derive(Debug, Clone)]
pub enum ScanRecord {
    Path(PathBuf),
    Payload(RawScan),
}

impl ScanRecord {
    pub fn load(&self, synth_timestamps: bool) -> Result<RawScan, IoError> {
        let mut scan = match self {
            ScanRecord::Payload(scan) => scan.clone(),
            ScanRecord::Path(path) => {
                let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
                match ext {
                    "bin" => read_scan_kitti_bin(&read_file(path)?)?,
                    "csv" => {
                        let bytes = read_file(path)?;
                        let text = String::from_utf8(bytes).map_err(|_| {
                            IoError::format(format!("{}: not valid UTF-8", path.display()))
                        })?;
                        read_scan_csv(&text)?
                    }
                    other => {
                        return Err(IoError::format(format!(
                            "{}: unsupported scan extension '{other}'",
                            path.display()
                        )))
                    }
                }
            }
        };
        if synth_timestamps && scan.timestamps.is_none() {
            scan.timestamps = Some(azimuth_timestamps(&scan.points));
        }
        Ok(scan)
    }
}

/// Sweep fractions synthesized from the horizontal firing angle, for
/// spinning sensors whose datasets carry no per-point time.
fn azimuth_timestamps(points: &[Vector3<f64>]) -> Vec<f64> {
    points
        .iter()
        .map(|p| (p.y.atan2(p.x) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI))
        .collect()
}

/// Time-ordered scan sequence plus optional ground truth.
pub struct SequenceSource {
    pub scans: Vec<ScanRecord>,
    pub ground_truth: Option<Vec<Pose>>,
    pub max_range: f64,
}

impl SequenceSource {
    /// Reads a sequence directory: `.bin` / `.csv` scans in lexicographic
    /// order, plus `poses.txt` ground truth when present.
    pub fn from_directory(dir: &Path, max_range: f64) -> Result<Self, IoError> {
        let entries = fs::read_dir(dir).map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut scan_paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("bin") | Some("csv")
                )
            })
            .collect();
        scan_paths.sort();
        if scan_paths.is_empty() {
            return Err(IoError::format(format!(
                "{}: no .bin or .csv scans found",
                dir.display()
            )));
        }
        let gt_path = dir.join("poses.txt");
        let ground_truth = if gt_path.exists() {
            let bytes = read_file(&gt_path)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| IoError::format("poses.txt: not valid UTF-8"))?;
            Some(read_trajectory(&text)?)
        } else {
            None
        };
        Ok(SequenceSource {
            scans: scan_paths.into_iter().map(ScanRecord::Path).collect(),
            ground_truth,
            max_range,
        })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }
}

/// Per-frame diagnostics for `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: u64,
    pub constraints_added: usize,
    pub registrations_aborted: usize,
    pub degenerate: bool,
    pub keyframe_inserted: bool,
    pub chi2: f64,
}

/// Run report: the effective configuration (with the derived gamma made
/// explicit) and one diagnostics record per frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub effective_gamma: f64,
    pub seed: Option<u64>,
    pub frames: Vec<FrameDiagnostics>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
