//! Streamline voxelization on a regular isotropic grid.
//!
//! A point `p` lands in voxel `floor(p / spacing)` along each axis, so voxel
//! `(i, j, k)` owns the half-open box `[i*s, (i+1)*s) x ...`. Points exactly
//! on a boundary take the larger index, matching the floor convention.
//!
//! Segment traversal walks every voxel a segment passes through (the
//! Amanatides & Woo incremental method): starting from the first endpoint's
//! voxel, repeatedly step across whichever axis boundary the ray crosses
//! next until the final endpoint's voxel is reached. This marks voxels the
//! segment merely crosses, which point binning at the vertices would miss.

use std::collections::HashSet;

use crate::bundle::{FiberCluster, Point3, Streamline};

/// How streamline geometry is converted to voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoxelizeMode {
    /// Exact segment walk: every voxel any segment passes through.
    #[default]
    SegmentWalk,
    /// Only the voxels containing the polyline vertices. Cheaper and a
    /// strict subset of `SegmentWalk`; kept for cross-checking.
    PointBinning,
}

/// Occupancy mask of an isotropic voxel grid.
#[derive(Debug, Clone)]
pub struct VoxelMask {
    spacing: f64,
    voxels: HashSet<[i64; 3]>,
}

impl VoxelMask {
    pub fn new(spacing: f64) -> Self {
        assert!(spacing.is_finite() && spacing > 0.0, "spacing must be positive");
        Self {
            spacing,
            voxels: HashSet::new(),
        }
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn contains(&self, v: [i64; 3]) -> bool {
        self.voxels.contains(&v)
    }

    pub fn insert(&mut self, v: [i64; 3]) {
        self.voxels.insert(v);
    }

    pub fn voxels(&self) -> impl Iterator<Item = [i64; 3]> + '_ {
        self.voxels.iter().copied()
    }

    /// Voxel index of a point under the floor convention.
    pub fn index_of(&self, p: Point3) -> [i64; 3] {
        index_of(p, self.spacing)
    }

    /// Occupied volume in mm^3: count * spacing^3.
    pub fn volume(&self) -> f64 {
        self.voxels.len() as f64 * self.spacing.powi(3)
    }

    /// Number of surface voxels: occupied voxels with at least one of the
    /// six face neighbors unoccupied.
    pub fn surface_voxel_count(&self) -> usize {
        self.voxels
            .iter()
            .filter(|&&v| {
                FACE_NEIGHBORS
                    .iter()
                    .any(|d| !self.voxels.contains(&[v[0] + d[0], v[1] + d[1], v[2] + d[2]]))
            })
            .count()
    }

    /// Surface area estimate in mm^2: surface voxel count * spacing^2.
    pub fn surface_area(&self) -> f64 {
        self.surface_voxel_count() as f64 * self.spacing * self.spacing
    }

    /// Number of exposed faces (occupied-to-empty face adjacencies). A
    /// tighter boundary-area estimate than counting surface voxels once;
    /// selectable via [`crate::shape::ShapeConfig::exposed_face_area`].
    pub fn exposed_face_count(&self) -> usize {
        self.voxels
            .iter()
            .map(|&v| {
                FACE_NEIGHBORS
                    .iter()
                    .filter(|d| !self.voxels.contains(&[v[0] + d[0], v[1] + d[1], v[2] + d[2]]))
                    .count()
            })
            .sum()
    }
}

const FACE_NEIGHBORS: [[i64; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

pub fn index_of(p: Point3, spacing: f64) -> [i64; 3] {
    [
        (p[0] / spacing).floor() as i64,
        (p[1] / spacing).floor() as i64,
        (p[2] / spacing).floor() as i64,
    ]
}

/// Voxelize a whole cluster into one shared mask.
pub fn voxelize_cluster(cluster: &FiberCluster, spacing: f64, mode: VoxelizeMode) -> VoxelMask {
    voxelize_streamlines(cluster.streamlines(), spacing, mode)
}

/// Voxelize an arbitrary streamline subset (used for trunk volume).
pub fn voxelize_streamlines<'a, I>(streamlines: I, spacing: f64, mode: VoxelizeMode) -> VoxelMask
where
    I: IntoIterator<Item = &'a Streamline>,
{
    let mut mask = VoxelMask::new(spacing);
    for s in streamlines {
        match mode {
            VoxelizeMode::PointBinning => {
                for &p in s.points() {
                    mask.insert(index_of(p, spacing));
                }
            }
            VoxelizeMode::SegmentWalk => {
                for w in s.points().windows(2) {
                    traverse_segment(w[0], w[1], spacing, &mut mask);
                }
            }
        }
    }
    mask
}

/// Walk the voxels from `a` to `b`, inserting each into `mask`.
fn traverse_segment(a: Point3, b: Point3, spacing: f64, mask: &mut VoxelMask) {
    let start = index_of(a, spacing);
    let end = index_of(b, spacing);
    mask.insert(start);
    if start == end {
        return;
    }

    let dir = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let mut voxel = start;
    let mut step = [0i64; 3];
    // t_max[axis]: segment parameter (0..1) at the next boundary crossing on
    // that axis; t_delta[axis]: parameter distance between crossings.
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for ax in 0..3 {
        if dir[ax] > 0.0 {
            step[ax] = 1;
            let next_boundary = (voxel[ax] + 1) as f64 * spacing;
            t_max[ax] = (next_boundary - a[ax]) / dir[ax];
            t_delta[ax] = spacing / dir[ax];
        } else if dir[ax] < 0.0 {
            step[ax] = -1;
            let next_boundary = voxel[ax] as f64 * spacing;
            t_max[ax] = (next_boundary - a[ax]) / dir[ax];
            t_delta[ax] = spacing / -dir[ax];
        }
    }

    // A segment spanning k voxels per axis crosses at most sum(k) boundaries;
    // the guard only trips on floating-point pathology.
    let max_steps: i64 = (0..3).map(|ax| (end[ax] - start[ax]).abs() + 1).sum();
    for _ in 0..max_steps.max(4) * 4 {
        let ax = (0..3).min_by(|&i, &j| t_max[i].total_cmp(&t_max[j])).unwrap();
        if t_max[ax] > 1.0 {
            break;
        }
        t_max[ax] += t_delta[ax];
        voxel[ax] += step[ax];
        mask.insert(voxel);
        if voxel == end {
            return;
        }
    }
    // Floating point can land the walk next to `end` when b sits exactly on
    // a boundary; the endpoint voxel is owed by the floor convention.
    mask.insert(end);
}
