//! Exact nearest-neighbor index over a fixed target cloud.
//!
//! Queries must match a brute-force linear scan bit for bit: the closest
//! point strictly within the search radius wins, ties are broken by the
//! lowest insertion index. The kd-tree layout is an internal detail.

use nalgebra::Vector3;
use thiserror::Error;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("cannot build a spatial index over an empty cloud")]
    EmptyTarget,
}

enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Immutable kd-tree over a point cloud; safe for concurrent queries.
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: u32,
}

impl SpatialIndex {
    pub fn build(points: &[Vector3<f64>]) -> Result<Self, SpatialError> {
        if points.is_empty() {
            return Err(SpatialError::EmptyTarget);
        }
        let mut index = SpatialIndex {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        let n = index.order.len();
        index.root = index.build_range(0, n);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, insertion_index: usize) -> &Vector3<f64> {
        &self.points[insertion_index]
    }

    fn build_range(&mut self, start: usize, end: usize) -> u32 {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                start: start as u32,
                end: end as u32,
            });
            return (self.nodes.len() - 1) as u32;
        }
        // Split along the widest extent for balanced cells.
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            let p = &self.points[i as usize];
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            let (pa, pb) = (points[a as usize][axis], points[b as usize][axis]);
            pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
        });
        let value = self.points[self.order[mid] as usize][axis];
        let left = self.build_range(start, mid);
        let right = self.build_range(mid, end);
        self.nodes.push(Node::Split {
            axis: axis as u8,
            value,
            left,
            right,
        });
        (self.nodes.len() - 1) as u32
    }

    /// Nearest indexed point with distance strictly below `d_max`, as
    /// `(insertion index, distance)`.
    pub fn nearest_within(&self, query: &Vector3<f64>, d_max: f64) -> Option<(usize, f64)> {
        let mut best: Option<(f64, u32)> = None;
        self.search(self.root, query, d_max * d_max, &mut best);
        best.map(|(d2, i)| (i as usize, d2.sqrt()))
    }

    fn search(&self, node: u32, query: &Vector3<f64>, radius2: f64, best: &mut Option<(f64, u32)>) {
        match &self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start as usize..*end as usize] {
                    let d2 = (self.points[i as usize] - query).norm_squared();
                    let better = match best {
                        None => d2 < radius2,
                        Some((bd2, bi)) => d2 < *bd2 || (d2 == *bd2 && i < *bi),
                    };
                    if better {
                        *best = Some((d2, i));
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[*axis as usize] - value;
                let (near, far) = if diff < 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, query, radius2, best);
                // Equal-distance points behind the plane still matter for
                // the insertion-index tie break, hence <=.
                let bound = best.map(|(d2, _)| d2).unwrap_or(radius2);
                if diff * diff <= bound {
                    self.search(far, query, radius2, best);
                }
            }
        }
    }
}
