//! Scan container types, constant-motion deskewing and the double voxel
//! downsampling that produces the keyframe-density cloud `K` and the
//! registration-density cloud `I`.

use std::collections::HashSet;

use nalgebra::Vector3;

use crate::se3::Pose;

/// Raw sensor scan in the ego frame. Timestamps, when present, are
/// per-point sweep fractions in [0, 1].
#[derive(Debug, Clone, Default)]
pub struct RawScan {
    pub points: Vec<Vector3<f64>>,
    pub timestamps: Option<Vec<f64>>,
    /// Scan acquisition time in seconds.
    pub frame_time: f64,
}

impl RawScan {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        RawScan {
            points,
            timestamps: None,
            frame_time: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Cloud produced by voxel downsampling; at `source_voxel_size` no two
/// points share a voxel key.
#[derive(Debug, Clone)]
pub struct DownsampledScan {
    pub points: Vec<Vector3<f64>>,
    pub source_voxel_size: f64,
}

/// Integer voxel index of a point at a given voxel size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VoxelKey {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelKey {
    pub fn of(p: &Vector3<f64>, voxel_size: f64) -> Self {
        VoxelKey {
            ix: (p.x / voxel_size).floor() as i64,
            iy: (p.y / voxel_size).floor() as i64,
            iz: (p.z / voxel_size).floor() as i64,
        }
    }
}

/// Motion-compensates a scan with the constant motion model. Each point
/// with sweep fraction `s` is moved by the fractional motion between its
/// acquisition time and the end of the sweep (`s_ref = 1`), so the output
/// is expressed in the pose at scan completion. Scans without timestamps
/// pass through unchanged.
pub fn deskew(scan: &RawScan, motion: &Pose) -> RawScan {
    let Some(timestamps) = &scan.timestamps else {
        return scan.clone();
    };
    debug_assert_eq!(timestamps.len(), scan.points.len());
    let points = scan
        .points
        .iter()
        .zip(timestamps.iter())
        .map(|(p, &s)| motion.interpolate(s - 1.0).transform_point(p))
        .collect();
    RawScan {
        points,
        timestamps: Some(timestamps.clone()),
        frame_time: scan.frame_time,
    }
}

/// Keeps the first point seen in each voxel, preserving input order.
pub fn voxel_downsample(points: &[Vector3<f64>], voxel_size: f64) -> DownsampledScan {
    debug_assert!(voxel_size > 0.0);
    let mut seen = HashSet::with_capacity(points.len());
    let mut kept = Vec::new();
    for p in points {
        if seen.insert(VoxelKey::of(p, voxel_size)) {
            kept.push(*p);
        }
    }
    DownsampledScan {
        points: kept,
        source_voxel_size: voxel_size,
    }
}

/// Double downsampling: deskew, then subsample once at map density for
/// the keyframe cloud `K` and a second time at registration density for
/// `I`, so `I ⊆ K ⊆ deskewed scan`.
pub fn preprocess(
    scan: &RawScan,
    motion: &Pose,
    v_map: f64,
    v_icp: f64,
) -> (DownsampledScan, DownsampledScan) {
    debug_assert!(v_icp >= v_map);
    let deskewed = deskew(scan, motion);
    let keyframe_cloud = voxel_downsample(&deskewed.points, v_map);
    let registration_cloud = voxel_downsample(&keyframe_cloud.points, v_icp);
    (keyframe_cloud, registration_cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn voxel_key_uses_mathematical_floor() {
        assert_eq!(VoxelKey::of(&v(0.1, 0.0, 0.0), 0.5), VoxelKey { ix: 0, iy: 0, iz: 0 });
        assert_eq!(VoxelKey::of(&v(-0.1, 0.0, 0.0), 0.5), VoxelKey { ix: -1, iy: 0, iz: 0 });
        assert_eq!(VoxelKey::of(&v(-0.6, 1.5, -1.5), 0.5), VoxelKey { ix: -2, iy: 3, iz: -3 });
    }

    #[test]
    fn downsample_keeps_first_point_per_voxel() {
        let d = voxel_downsample(&[v(0.1, 0.0, 0.0), v(0.2, 0.0, 0.0)], 0.5);
        assert_eq!(d.points, vec![v(0.1, 0.0, 0.0)]);

        let d = voxel_downsample(&[v(0.1, 0.0, 0.0), v(0.6, 0.0, 0.0)], 0.5);
        assert_eq!(d.points.len(), 2);

        assert!(voxel_downsample(&[], 0.5).points.is_empty());
    }

    #[test]
    fn downsample_output_order_matches_input_order() {
        let pts = vec![v(3.0, 0.0, 0.0), v(0.1, 0.0, 0.0), v(1.7, 0.0, 0.0)];
        let d = voxel_downsample(&pts, 0.5);
        assert_eq!(d.points, pts);
    }

    #[test]
    fn downsample_matches_bucketing_oracle_on_grid() {
        // 1.0 m grid: v_map = 0.5 keeps everything, v_icp = 1.5 keeps what
        // an independent bucketing of keys says it should.
        let mut pts = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                for z in 0..3 {
                    pts.push(v(x as f64, y as f64, z as f64));
                }
            }
        }
        let k = voxel_downsample(&pts, 0.5);
        assert_eq!(k.points.len(), pts.len());

        let i = voxel_downsample(&k.points, 1.5);
        let mut oracle: HashMap<(i64, i64, i64), Vector3<f64>> = HashMap::new();
        for p in &k.points {
            let key = (
                (p.x / 1.5).floor() as i64,
                (p.y / 1.5).floor() as i64,
                (p.z / 1.5).floor() as i64,
            );
            oracle.entry(key).or_insert(*p);
        }
        assert_eq!(i.points.len(), oracle.len());
        for p in &i.points {
            let key = (
                (p.x / 1.5).floor() as i64,
                (p.y / 1.5).floor() as i64,
                (p.z / 1.5).floor() as i64,
            );
            assert_eq!(oracle[&key], *p);
        }
    }

    #[test]
    fn no_two_output_points_share_a_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..2000)
            .map(|_| v(rng.random::<f64>() * 20.0 - 10.0, rng.random::<f64>() * 20.0 - 10.0, rng.random::<f64>() * 4.0))
            .collect();
        let d = voxel_downsample(&pts, 0.7);
        let mut seen = HashSet::new();
        for p in &d.points {
            assert!(seen.insert(VoxelKey::of(p, 0.7)), "duplicate voxel in output");
        }
    }

    #[test]
    fn deskew_identity_motion_is_identity() {
        let scan = RawScan {
            points: vec![v(1.0, 2.0, 3.0), v(-4.0, 0.5, 0.0)],
            timestamps: Some(vec![0.3, 0.9]),
            frame_time: 0.0,
        };
        let out = deskew(&scan, &Pose::identity());
        for (a, b) in out.points.iter().zip(scan.points.iter()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn deskew_without_timestamps_is_identity() {
        let scan = RawScan::from_points(vec![v(1.0, 0.0, 0.0)]);
        let motion = Pose::from_translation(v(5.0, 0.0, 0.0));
        let out = deskew(&scan, &motion);
        assert_eq!(out.points, scan.points);
    }

    #[test]
    fn deskew_end_of_sweep_point_is_unchanged() {
        let scan = RawScan {
            points: vec![v(1.0, 0.0, 0.0)],
            timestamps: Some(vec![1.0]),
            frame_time: 0.0,
        };
        let motion = Pose::from_translation(v(0.7, -0.2, 0.1));
        let out = deskew(&scan, &motion);
        assert!((out.points[0] - v(1.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn deskew_start_of_sweep_applies_inverse_motion() {
        let scan = RawScan {
            points: vec![v(0.0, 0.0, 0.0)],
            timestamps: Some(vec![0.0]),
            frame_time: 0.0,
        };
        let motion = Pose::from_translation(v(1.0, 0.0, 0.0));
        let out = deskew(&scan, &motion);
        assert!((out.points[0] - v(-1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn preprocess_subset_chain_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<_> = (0..10_000)
            .map(|_| v(rng.random::<f64>() * 40.0 - 20.0, rng.random::<f64>() * 40.0 - 20.0, rng.random::<f64>() * 0.3))
            .collect();
        let scan = RawScan::from_points(pts.clone());
        let (k, i) = preprocess(&scan, &Pose::identity(), 0.5, 1.5);
        assert!(i.points.len() <= k.points.len());
        assert!(k.points.len() <= pts.len());

        let as_bits = |p: &Vector3<f64>| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
        let k_set: HashSet<_> = k.points.iter().map(as_bits).collect();
        let p_set: HashSet<_> = pts.iter().map(as_bits).collect();
        assert!(i.points.iter().all(|p| k_set.contains(&as_bits(p))));
        assert!(k.points.iter().all(|p| p_set.contains(&as_bits(p))));
    }

    #[test]
    fn preprocess_single_point() {
        let scan = RawScan::from_points(vec![v(1.0, 1.0, 1.0)]);
        let (k, i) = preprocess(&scan, &Pose::identity(), 0.5, 1.5);
        assert_eq!(k.points, vec![v(1.0, 1.0, 1.0)]);
        assert_eq!(i.points, vec![v(1.0, 1.0, 1.0)]);
    }

    #[test]
    fn preprocess_grid_density_matches_oracle() {
        // 1.0 m planar grid: K keeps all; I at 1.5 m keeps one point per
        // 1.5 m voxel, counted independently.
        let mut pts = Vec::new();
        for x in 0..30 {
            for y in 0..30 {
                pts.push(v(x as f64, y as f64, 0.0));
            }
        }
        let scan = RawScan::from_points(pts.clone());
        let (k, i) = preprocess(&scan, &Pose::identity(), 0.5, 1.5);
        assert_eq!(k.points.len(), 900);

        let mut cells = HashSet::new();
        for p in &pts {
            cells.insert(((p.x / 1.5).floor() as i64, (p.y / 1.5).floor() as i64));
        }
        assert_eq!(i.points.len(), cells.len());
        assert_relative_eq!(i.points.len() as f64 / k.points.len() as f64, 4.0 / 9.0, epsilon = 0.05);
    }
}
