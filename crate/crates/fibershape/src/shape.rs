//! The 12 fiber-cluster shape descriptors plus the traditional FA/MD/NoS
//! features.
//!
//! Analytic descriptors (length, span, curl, end regions) come straight from
//! the streamline polylines; volumetric ones (volume, surface area, diameter,
//! elongation, irregularity, trunk/branch) go through a single shared
//! voxelization of the cluster. Every descriptor carries a validity flag:
//! an empty cluster yields an all-invalid, zero-valued vector so feature
//! matrices keep a fixed column count, and downstream consumers use the zero.

use crate::bundle::{dist, FiberCluster, Point3, ScalarMap};
use crate::voxel::{voxelize_streamlines, VoxelMask, VoxelizeMode};

/// Knobs shared by every descriptor computation.
#[derive(Debug, Clone)]
pub struct ShapeConfig {
    /// Isotropic voxel edge length in mm.
    pub spacing: f64,
    /// `false`: diameter = sqrt(volume/(π·length)). `true`: the cylinder
    /// inversion 2·sqrt(volume/(π·length)). The bare square root is the
    /// default; it is the equivalent cylinder's radius, but it is kept as
    /// the reference convention (see README).
    pub cylinder_diameter: bool,
    /// `false`: surface area = surface voxel count × spacing². `true`: count
    /// exposed voxel faces instead of surface voxels.
    pub exposed_face_area: bool,
    pub mode: VoxelizeMode,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            spacing: 1.0,
            cylinder_diameter: false,
            exposed_face_area: false,
            mode: VoxelizeMode::SegmentWalk,
        }
    }
}

/// A descriptor value with its validity flag. Invalid features hold 0.0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub value: f64,
    pub valid: bool,
}

impl Feature {
    pub fn valid(value: f64) -> Self {
        Self { value, valid: true }
    }

    pub fn invalid() -> Self {
        Self {
            value: 0.0,
            valid: false,
        }
    }
}

/// The 12 shape descriptors of one cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeDescriptors {
    pub length: Feature,
    pub span: Feature,
    pub curl: Feature,
    pub volume: Feature,
    pub trunk_volume: Feature,
    pub branch_volume: Feature,
    pub diameter: Feature,
    pub elongation: Feature,
    pub total_surface_area: Feature,
    pub total_end_region_radius: Feature,
    pub total_end_region_area: Feature,
    pub irregularity: Feature,
}

impl ShapeDescriptors {
    pub fn all_invalid() -> Self {
        let f = Feature::invalid();
        Self {
            length: f,
            span: f,
            curl: f,
            volume: f,
            trunk_volume: f,
            branch_volume: f,
            diameter: f,
            elongation: f,
            total_surface_area: f,
            total_end_region_radius: f,
            total_end_region_area: f,
            irregularity: f,
        }
    }
}

/// One end of an oriented bundle, summarized as a disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndRegion {
    pub centroid: Point3,
    /// 1.5 × mean distance of the end's points to the centroid.
    pub radius: f64,
    /// π·radius², exactly.
    pub area: f64,
}

/// Both end disks plus the per-streamline orientation that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EndRegionSummary {
    pub ends: [EndRegion; 2],
    /// flipped[i]: streamline i is traversed last-to-first when oriented.
    pub flipped: Vec<bool>,
}

/// FA/MD point means and the streamline count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraditionalFeatures {
    pub fa_mean: Feature,
    pub md_mean: Feature,
    pub nos: usize,
}

/// Mean streamline arc length: (1/n) Σ_i Σ_t ‖v_i(t) − v_i(t+1)‖₂.
pub fn length(cluster: &FiberCluster) -> Feature {
    if cluster.is_empty() {
        return Feature::invalid();
    }
    let sum: f64 = cluster.streamlines().iter().map(|s| s.arc_length()).sum();
    Feature::valid(sum / cluster.n() as f64)
}

/// Mean endpoint distance: (1/n) Σ_i ‖v_i(1) − v_i(m_i)‖₂.
pub fn span(cluster: &FiberCluster) -> Feature {
    if cluster.is_empty() {
        return Feature::invalid();
    }
    let sum: f64 = cluster
        .streamlines()
        .iter()
        .map(|s| dist(s.first(), s.last()))
        .sum();
    Feature::valid(sum / cluster.n() as f64)
}

/// length / span; invalid when span is 0 (closed-loop degenerate cluster).
pub fn curl(cluster: &FiberCluster) -> Feature {
    let l = length(cluster);
    let s = span(cluster);
    if !l.valid || !s.valid || s.value == 0.0 {
        return Feature::invalid();
    }
    Feature::valid(l.value / s.value)
}

/// Flip flags making streamline directions consistent: streamline 0 is the
/// reference; another streamline is flipped iff flipping strictly reduces
/// the sum of its endpoint distances to the reference's endpoints.
pub fn orient_streamlines(cluster: &FiberCluster) -> Vec<bool> {
    let Some(reference) = cluster.streamlines().first() else {
        return Vec::new();
    };
    let (ref_start, ref_end) = (reference.first(), reference.last());
    cluster
        .streamlines()
        .iter()
        .map(|s| {
            let keep = dist(s.first(), ref_start) + dist(s.last(), ref_end);
            let flip = dist(s.first(), ref_end) + dist(s.last(), ref_start);
            flip < keep
        })
        .collect()
}

/// End disks of the oriented cluster. `None` for an empty cluster.
pub fn end_regions(cluster: &FiberCluster) -> Option<EndRegionSummary> {
    if cluster.is_empty() {
        return None;
    }
    let flipped = orient_streamlines(cluster);
    let endpoints: Vec<[Point3; 2]> = cluster
        .streamlines()
        .iter()
        .zip(&flipped)
        .map(|(s, &f)| {
            if f {
                [s.last(), s.first()]
            } else {
                [s.first(), s.last()]
            }
        })
        .collect();

    let n = endpoints.len() as f64;
    let ends = [0, 1].map(|e| {
        let mut centroid = [0.0; 3];
        for p in &endpoints {
            for ax in 0..3 {
                centroid[ax] += p[e][ax];
            }
        }
        for c in &mut centroid {
            *c /= n;
        }
        let mean_dist: f64 = endpoints.iter().map(|p| dist(p[e], centroid)).sum::<f64>() / n;
        let radius = 1.5 * mean_dist;
        EndRegion {
            centroid,
            radius,
            area: std::f64::consts::PI * radius * radius,
        }
    });
    Some(EndRegionSummary { ends, flipped })
}

/// sqrt(volume/(π·length)), doubled under the cylinder convention.
pub fn diameter(volume: f64, length: f64, config: &ShapeConfig) -> Feature {
    if length <= 0.0 {
        return Feature::invalid();
    }
    let d = (volume / (std::f64::consts::PI * length)).sqrt();
    Feature::valid(if config.cylinder_diameter { 2.0 * d } else { d })
}

/// length / diameter.
pub fn elongation(length: f64, diameter: Feature) -> Feature {
    if !diameter.valid || diameter.value <= 0.0 {
        return Feature::invalid();
    }
    Feature::valid(length / diameter.value)
}

/// Boundary-voxel (or exposed-face) count scaled by spacing².
pub fn surface_area(mask: &VoxelMask, config: &ShapeConfig) -> f64 {
    let count = if config.exposed_face_area {
        mask.exposed_face_count()
    } else {
        mask.surface_voxel_count()
    };
    count as f64 * mask.spacing() * mask.spacing()
}

/// surface_area / (π · diameter · length).
pub fn irregularity(surface_area: f64, diameter: Feature, length: f64) -> Feature {
    if !diameter.valid || diameter.value <= 0.0 || length <= 0.0 {
        return Feature::invalid();
    }
    Feature::valid(surface_area / (std::f64::consts::PI * diameter.value * length))
}

/// Trunk = volume of the voxelized subset of streamlines whose two oriented
/// endpoints both lie within the respective end disk (distance ≤ R_e,
/// inclusive); branch = volume − trunk. The trunk mask is a subset of the
/// full mask, so branch ≥ 0 and the pair sums back to volume.
pub fn trunk_branch_volume(
    cluster: &FiberCluster,
    ends: &EndRegionSummary,
    volume: f64,
    config: &ShapeConfig,
) -> (Feature, Feature) {
    if cluster.is_empty() {
        return (Feature::invalid(), Feature::invalid());
    }
    let trunk: Vec<_> = cluster
        .streamlines()
        .iter()
        .zip(&ends.flipped)
        .filter(|(s, &f)| {
            let (start, end) = if f {
                (s.last(), s.first())
            } else {
                (s.first(), s.last())
            };
            dist(start, ends.ends[0].centroid) <= ends.ends[0].radius
                && dist(end, ends.ends[1].centroid) <= ends.ends[1].radius
        })
        .map(|(s, _)| s)
        .collect();
    let trunk_volume = voxelize_streamlines(trunk, config.spacing, config.mode).volume();
    (
        Feature::valid(trunk_volume),
        Feature::valid(volume - trunk_volume),
    )
}

/// Point means of the optional FA/MD maps plus the streamline count.
pub fn traditional(
    cluster: &FiberCluster,
    fa: Option<&ScalarMap>,
    md: Option<&ScalarMap>,
) -> TraditionalFeatures {
    let mean = |map: Option<&ScalarMap>| -> Feature {
        let Some(map) = map else {
            return Feature::invalid();
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in map.values() {
            sum += row.iter().sum::<f64>();
            count += row.len();
        }
        if count == 0 {
            Feature::invalid()
        } else {
            Feature::valid(sum / count as f64)
        }
    };
    TraditionalFeatures {
        fa_mean: mean(fa),
        md_mean: mean(md),
        nos: cluster.n(),
    }
}

/// All 12 descriptors plus FA/MD/NoS, voxelizing the cluster exactly once.
pub fn compute_all(
    cluster: &FiberCluster,
    config: &ShapeConfig,
    fa: Option<&ScalarMap>,
    md: Option<&ScalarMap>,
) -> (ShapeDescriptors, TraditionalFeatures) {
    let trad = traditional(cluster, fa, md);
    if cluster.is_empty() {
        return (ShapeDescriptors::all_invalid(), trad);
    }

    let mask = voxelize_streamlines(cluster.streamlines(), config.spacing, config.mode);
    let length = length(cluster);
    let span = span(cluster);
    let curl = curl(cluster);
    let volume = Feature::valid(mask.volume());
    let sa = Feature::valid(surface_area(&mask, config));
    let diameter = diameter(volume.value, length.value, config);
    let elongation = elongation(length.value, diameter);
    let irregularity = irregularity(sa.value, diameter, length.value);

    let ends = end_regions(cluster).expect("non-empty cluster has end regions");
    let (trunk, branch) = trunk_branch_volume(cluster, &ends, volume.value, config);
    let total_radius = ends.ends[0].radius + ends.ends[1].radius;
    let total_area = ends.ends[0].area + ends.ends[1].area;

    (
        ShapeDescriptors {
            length,
            span,
            curl,
            volume,
            trunk_volume: trunk,
            branch_volume: branch,
            diameter,
            elongation,
            total_surface_area: sa,
            total_end_region_radius: Feature::valid(total_radius),
            total_end_region_area: Feature::valid(total_area),
            irregularity,
        },
        trad,
    )
}
