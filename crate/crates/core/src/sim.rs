//! Deterministic lidar simulator: spherical ray casting against a world
//! of axis-aligned boxes and planes along a scripted trajectory, with
//! exact ground truth. Serves as the independent oracle for registration
//! and end-to-end tests.

use nalgebra::Vector3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::io::{ScanRecord, SequenceSource};
use crate::pointcloud::RawScan;
use crate::se3::{so3_exp, Pose};

/// Fixed vertical ray pattern: 64 elevation rings spanning [-22.5, 22.5]
/// degrees.
const RINGS: usize = 64;
const ELEVATION_SPAN_DEG: f64 = 45.0;

/// Axis-aligned box; a plane is a box with one zero extent.
#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    /// First entry distance of the ray into the box within `t_max`.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 1e-9_f64;
        let mut t1 = t_max;
        for i in 0..3 {
            let d = dir[i];
            if d.abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

/// Grid of horizontal square plane tiles at per-tile heights. A real road
/// has centimeter texture; a perfectly flat synthetic plane is invariant
/// under horizontal translation, which makes consecutive ray-pattern
/// scans pattern-lock during registration. Jittered tile heights restore
/// the position dependence a real surface has.
#[derive(Debug, Clone)]
pub struct HeightGrid {
    pub origin: (f64, f64),
    pub tile: f64,
    pub nx: usize,
    pub ny: usize,
    pub heights: Vec<f64>,
}

impl HeightGrid {
    fn height(&self, ix: usize, iy: usize) -> f64 {
        self.heights[iy * self.nx + ix]
    }

    /// First tile-plane hit along the ray, found by marching the XY cell
    /// grid in ray order.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        if dir.z.abs() < 1e-12 {
            return None;
        }
        let span_x = self.nx as f64 * self.tile;
        let span_y = self.ny as f64 * self.tile;
        // Clip the ray's XY projection to the grid rectangle.
        let mut t0 = 0.0_f64;
        let mut t1 = t_max;
        for (o, d, lo, hi) in [
            (origin.x, dir.x, self.origin.0, self.origin.0 + span_x),
            (origin.y, dir.y, self.origin.1, self.origin.1 + span_y),
        ] {
            if d.abs() < 1e-15 {
                if o < lo || o > hi {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((lo - o) * inv, (hi - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        let cell_of = |t: f64| -> (i64, i64) {
            let p = origin + dir * t;
            (
                ((p.x - self.origin.0) / self.tile).floor() as i64,
                ((p.y - self.origin.1) / self.tile).floor() as i64,
            )
        };
        let (mut ix, mut iy) = cell_of(t0 + 1e-12);
        let step_x: i64 = if dir.x > 0.0 { 1 } else { -1 };
        let step_y: i64 = if dir.y > 0.0 { 1 } else { -1 };
        let next_boundary = |i: i64, step: i64, o: f64, d: f64, grid_o: f64| -> f64 {
            if d.abs() < 1e-15 {
                return f64::INFINITY;
            }
            let edge = grid_o + (i + if step > 0 { 1 } else { 0 }) as f64 * self.tile;
            (edge - o) / d
        };
        loop {
            if ix >= 0 && iy >= 0 && (ix as usize) < self.nx && (iy as usize) < self.ny {
                let h = self.height(ix as usize, iy as usize);
                let t_hit = (h - origin.z) / dir.z;
                if t_hit > 1e-9 && t_hit <= t1 {
                    let p = origin + dir * t_hit;
                    let in_x = p.x >= self.origin.0 + ix as f64 * self.tile - 1e-12
                        && p.x <= self.origin.0 + (ix + 1) as f64 * self.tile + 1e-12;
                    let in_y = p.y >= self.origin.1 + iy as f64 * self.tile - 1e-12
                        && p.y <= self.origin.1 + (iy + 1) as f64 * self.tile + 1e-12;
                    if in_x && in_y {
                        return Some(t_hit);
                    }
                }
            }
            let tx = next_boundary(ix, step_x, origin.x, dir.x, self.origin.0);
            let ty = next_boundary(iy, step_y, origin.y, dir.y, self.origin.1);
            let t = if tx < ty {
                ix += step_x;
                tx
            } else {
                iy += step_y;
                ty
            };
            if t > t1 || !t.is_finite() {
                return None;
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct World {
    pub boxes: Vec<Aabb>,
    pub grids: Vec<HeightGrid>,
    pub seed: u64,
}

impl World {
    pub fn new(seed: u64) -> Self {
        World {
            boxes: Vec::new(),
            grids: Vec::new(),
            seed,
        }
    }

    pub fn add_box(&mut self, min: Vector3<f64>, max: Vector3<f64>) {
        self.boxes.push(Aabb { min, max });
    }

    /// Horizontal plane at height `z` covering the given rectangle.
    pub fn add_ground_plane(&mut self, z: f64, min_xy: (f64, f64), max_xy: (f64, f64)) {
        self.boxes.push(Aabb {
            min: Vector3::new(min_xy.0, min_xy.1, z),
            max: Vector3::new(max_xy.0, max_xy.1, z),
        });
    }

    /// Patchwork ground: square plane tiles with deterministic height
    /// jitter.
    pub fn add_patchwork_ground(
        &mut self,
        min_xy: (f64, f64),
        max_xy: (f64, f64),
        tile: f64,
        jitter: f64,
        seed: u64,
    ) {
        let nx = ((max_xy.0 - min_xy.0) / tile).ceil().max(1.0) as usize;
        let ny = ((max_xy.1 - min_xy.1) / tile).ceil().max(1.0) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heights = (0..nx * ny)
            .map(|_| rng.random::<f64>() * jitter)
            .collect();
        self.grids.push(HeightGrid {
            origin: min_xy,
            tile,
            nx,
            ny,
            heights,
        });
    }

    /// Textured ground plus boxes scattered alongside a path, so that
    /// every path position has structure in sensor range. Deterministic
    /// in the world seed.
    pub fn scattered_along(positions: &[Vector3<f64>], seed: u64) -> World {
        let mut world = World::new(seed);
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        // Grazing far-field returns drop out on real road surfaces; a
        // bounded band keeps the vertical geometry well conditioned.
        world.add_patchwork_ground(
            (lo.x - 45.0, lo.y - 45.0),
            (hi.x + 45.0, hi.y + 45.0),
            2.0,
            0.15,
            seed ^ 0x9e37_79b9,
        );

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut since_last = f64::INFINITY;
        let mut side = 1.0;
        for (k, p) in positions.iter().enumerate() {
            let step = if k == 0 {
                0.0
            } else {
                (p - positions[k - 1]).norm()
            };
            since_last += step;
            if since_last < 5.0 {
                continue;
            }
            since_last = 0.0;
            // Local heading from the neighboring position.
            let heading = if k + 1 < positions.len() {
                positions[k + 1] - p
            } else if k > 0 {
                p - positions[k - 1]
            } else {
                Vector3::x()
            };
            let heading = if heading.norm() < 1e-9 {
                Vector3::x()
            } else {
                heading.normalize()
            };
            let lateral = Vector3::new(-heading.y, heading.x, 0.0);
            for _ in 0..2 {
                side = -side;
                let offset = 7.0 + rng.random::<f64>() * 9.0;
                let center = p + lateral * (side * offset);
                let half = 1.0 + rng.random::<f64>() * 2.0;
                let height = 2.5 + rng.random::<f64>() * 4.0;
                world.add_box(
                    Vector3::new(center.x - half, center.y - half, 0.0),
                    Vector3::new(center.x + half, center.y + half, height),
                );
            }
        }
        world
    }

    /// Closest hit over all primitives.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
        let box_hit = self
            .boxes
            .iter()
            .filter_map(|b| b.intersect(origin, dir, max_range))
            .min_by(|a, b| a.partial_cmp(b).unwrap());
        let grid_hit = self
            .grids
            .iter()
            .filter_map(|g| g.intersect(origin, dir, max_range))
            .min_by(|a, b| a.partial_cmp(b).unwrap());
        match (box_hit, grid_hit) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Ground-truth poses at fixed time steps, built from piecewise-constant
/// (speed, yaw-rate) segments so consecutive poses differ by the scripted
/// motion exactly.
#[derive(Debug, Clone)]
pub struct ScriptedTrajectory {
    pub poses: Vec<Pose>,
    pub dt: f64,
}

impl ScriptedTrajectory {
    pub fn new(start: Pose, dt: f64) -> Self {
        ScriptedTrajectory {
            poses: vec![start],
            dt,
        }
    }

    /// Appends `steps` poses moving at `speed` m/s with `yaw_rate` rad/s.
    pub fn segment(mut self, steps: usize, speed: f64, yaw_rate: f64) -> Self {
        let step = Pose::from_parts(
            so3_exp(&Vector3::new(0.0, 0.0, yaw_rate * self.dt)),
            Vector3::new(speed * self.dt, 0.0, 0.0),
        );
        for _ in 0..steps {
            let last = *self.poses.last().unwrap();
            self.poses.push(last.compose(&step));
        }
        self
    }

    /// Applies small seeded body-frame attitude and height jitter to every
    /// pose after the first, mimicking vehicle suspension. The jittered
    /// poses are the ground truth; without this a simulated rigid sensor
    /// repeats its exact ray pattern each frame, which no real platform
    /// does.
    pub fn with_pose_jitter(mut self, angle_sigma: f64, z_sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pose in self.poses.iter_mut().skip(1) {
            let angles = Vector3::new(
                standard_normal(&mut rng) * angle_sigma,
                standard_normal(&mut rng) * angle_sigma,
                standard_normal(&mut rng) * angle_sigma,
            );
            let dz = standard_normal(&mut rng) * z_sigma;
            let jitter = Pose::from_parts(so3_exp(&angles), Vector3::new(0.0, 0.0, dz));
            *pose = pose.compose(&jitter);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| *p.translation()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SensorParams {
    /// Total ray budget; rounded down to a multiple of the 64 rings.
    pub rays: usize,
    pub max_range: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Attach per-point sweep fractions to the emitted scans.
    pub with_timestamps: bool,
}

impl Default for SensorParams {
    fn default() -> Self {
        SensorParams {
            rays: 64 * 180,
            max_range: 100.0,
            noise_sigma: 0.0,
            seed: 0,
            with_timestamps: false,
        }
    }
}

/// Casts the fixed spherical pattern from `pose` and returns first hits
/// in the sensor frame. The sweep runs azimuth-major; hit timestamps are
/// the column fraction in (0, 1]. Range noise is Gaussian from a seeded
/// generator, so identical seeds give bit-identical scans.
pub fn raycast_scan(
    world: &World,
    pose: &Pose,
    rays: usize,
    max_range: f64,
    noise_sigma: f64,
    seed: u64,
) -> RawScan {
    let per_ring = (rays / RINGS).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut timestamps = Vec::new();
    let origin = *pose.translation();
    for col in 0..per_ring {
        let azimuth = 2.0 * std::f64::consts::PI * col as f64 / per_ring as f64;
        let stamp = (col + 1) as f64 / per_ring as f64;
        for ring in 0..RINGS {
            let elevation = (-ELEVATION_SPAN_DEG / 2.0
                + ELEVATION_SPAN_DEG * ring as f64 / (RINGS - 1) as f64)
                .to_radians();
            let dir_sensor = Vector3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
            let dir_world = pose.rotation() * dir_sensor;
            if let Some(t) = world.cast(&origin, &dir_world, max_range) {
                let range = if noise_sigma > 0.0 {
                    (t + noise_sigma * standard_normal(&mut rng)).max(0.0)
                } else {
                    t
                };
                points.push(dir_sensor * range);
                timestamps.push(stamp);
            }
        }
    }
    RawScan {
        points,
        timestamps: Some(timestamps),
        frame_time: 0.0,
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One scan per trajectory pose plus the exact ground truth. Scans are
/// generated in parallel with per-frame seeds derived from the sensor
/// seed.
pub fn generate_sequence(
    world: &World,
    trajectory: &ScriptedTrajectory,
    sensor: &SensorParams,
) -> SequenceSource {
    let scans: Vec<ScanRecord> = trajectory
        .poses
        .par_iter()
        .enumerate()
        .map(|(k, pose)| {
            let mut scan = raycast_scan(
                world,
                pose,
                sensor.rays,
                sensor.max_range,
                sensor.noise_sigma,
                sensor.seed.wrapping_add(k as u64),
            );
            if !sensor.with_timestamps {
                scan.timestamps = None;
            }
            scan.frame_time = k as f64 * trajectory.dt;
            ScanRecord::Payload(scan)
        })
        .collect();
    SequenceSource {
        scans,
        ground_truth: Some(trajectory.poses.clone()),
        max_range: sensor.max_range,
    }
}
