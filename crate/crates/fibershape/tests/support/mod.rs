//! Shared machinery for the descriptor oracle and invariance suites:
//! seeded cluster generators, independent brute-force oracles, and the
//! check routines built on them. The CLI crate's acceptance suite includes
//! this module by path so the acceptance criteria run exactly these checks.
//!
//! The oracles deliberately re-derive everything from the raw point lists
//! with the simplest possible method — slab clipping over a bounding-box
//! enumeration instead of an incremental walk, flat sums instead of shared
//! masks — so they share no code with the library paths they check.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fibershape::bundle::{FiberCluster, Point3, ScalarKind, ScalarMap};
use fibershape::shape::{self, ShapeConfig};

pub type Lists = Vec<Vec<Point3>>;

// ---------------------------------------------------------------------------
// Small vector helpers (local on purpose; the oracles must not lean on the
// library's geometry code).
// ---------------------------------------------------------------------------

pub fn dist3(a: Point3, b: Point3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn add3(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale3(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn unit(a: Point3) -> Point3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Two unit vectors orthogonal to `w` (and to each other).
fn plane_basis(w: Point3) -> (Point3, Point3) {
    let pick = if w[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = unit([
        w[1] * pick[2] - w[2] * pick[1],
        w[2] * pick[0] - w[0] * pick[2],
        w[0] * pick[1] - w[1] * pick[0],
    ]);
    let v = [
        w[1] * u[2] - w[2] * u[1],
        w[2] * u[0] - w[0] * u[2],
        w[0] * u[1] - w[1] * u[0],
    ];
    (u, v)
}

/// Rodrigues rotation of `p` around unit `axis` by `angle`.
pub fn rotate(p: Point3, axis: Point3, angle: f64) -> Point3 {
    let (s, c) = angle.sin_cos();
    let k = axis;
    let kxp = [
        k[1] * p[2] - k[2] * p[1],
        k[2] * p[0] - k[0] * p[2],
        k[0] * p[1] - k[1] * p[0],
    ];
    let kdp = k[0] * p[0] + k[1] * p[1] + k[2] * p[2];
    [
        p[0] * c + kxp[0] * s + k[0] * kdp * (1.0 - c),
        p[1] * c + kxp[1] * s + k[1] * kdp * (1.0 - c),
        p[2] * c + kxp[2] * s + k[2] * kdp * (1.0 - c),
    ]
}

pub fn map_lists(lists: &Lists, f: impl Fn(Point3) -> Point3) -> Lists {
    lists
        .iter()
        .map(|pts| pts.iter().map(|&p| f(p)).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// One generated cluster plus the raw inputs the oracles work from.
pub struct GeneratedCluster {
    /// Point lists exactly as stored in the cluster (some reversed).
    pub lists: Lists,
    pub cluster: FiberCluster,
    pub fa_values: Option<Vec<Vec<f64>>>,
    pub md_values: Option<Vec<Vec<f64>>>,
    pub fa: Option<ScalarMap>,
    pub md: Option<ScalarMap>,
}

/// Keep coordinates a safe distance from grid planes at spacing 1 so the
/// slab-clipping oracle never has to adjudicate a borderline ownership.
fn nudge_off_grid(c: f64) -> f64 {
    let fr = c.rem_euclid(1.0);
    if fr < 1e-3 {
        c + 2e-3
    } else if fr > 1.0 - 1e-3 {
        c - 2e-3
    } else {
        c
    }
}

/// Seeded random cluster: 3–10 streamlines of 3–12 points along a wavy tube,
/// with occasional far-off strays (exercising trunk/branch) and ~30% of
/// streamlines stored reversed (exercising orientation). Seeds divisible by
/// 3 also carry FA/MD maps.
pub fn random_cluster(seed: u64) -> GeneratedCluster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed);
    let n_streamlines: usize = rng.random_range(3..=10);
    let n_pts: usize = rng.random_range(3..=12);

    let start: Point3 = [
        rng.random_range(-8.0..8.0),
        rng.random_range(-8.0..8.0),
        rng.random_range(-8.0..8.0),
    ];
    let dir = unit([
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0) + 0.1,
    ]);
    let (u, v) = plane_basis(dir);
    let curve_len: f64 = rng.random_range(6.0..20.0);
    let wobble_amp: f64 = rng.random_range(0.0..1.5);
    let wobble_freq: f64 = rng.random_range(0.5..3.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    let mut lists: Lists = Vec::with_capacity(n_streamlines);
    for _ in 0..n_streamlines {
        let rho: f64 = rng.random_range(0.0..2.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        // A quarter of the streamlines sit far off-axis so end disks do not
        // cover everything and the trunk is a proper subset.
        let stray: f64 = if rng.random::<f64>() < 0.25 {
            rng.random_range(3.0..6.0)
        } else {
            1.0
        };
        let off = add3(
            scale3(u, stray * rho * theta.cos()),
            scale3(v, stray * rho * theta.sin()),
        );
        let mut pts: Vec<Point3> = (0..n_pts)
            .map(|i| {
                let t = i as f64 / (n_pts - 1) as f64;
                let swing = wobble_amp * (wobble_freq * std::f64::consts::TAU * t + phase).sin();
                let jitter: Point3 = [
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ];
                let p = add3(
                    add3(start, scale3(dir, t * curve_len)),
                    add3(scale3(u, swing), add3(off, jitter)),
                );
                [
                    nudge_off_grid(p[0]),
                    nudge_off_grid(p[1]),
                    nudge_off_grid(p[2]),
                ]
            })
            .collect();
        if rng.random::<f64>() < 0.3 {
            pts.reverse();
        }
        lists.push(pts);
    }

    let cluster = FiberCluster::from_points(1, lists.clone()).expect("generated points are finite");

    let (fa_values, md_values, fa, md) = if seed % 3 == 0 {
        let fa_values: Vec<Vec<f64>> = lists
            .iter()
            .map(|pts| (0..pts.len()).map(|_| rng.random_range(0.05..0.95)).collect())
            .collect();
        let md_values: Vec<Vec<f64>> = lists
            .iter()
            .map(|pts| (0..pts.len()).map(|_| rng.random_range(1e-4..1e-3)).collect())
            .collect();
        let fa = ScalarMap::new(ScalarKind::Fa, fa_values.clone(), &cluster).expect("FA in range");
        let md = ScalarMap::new(ScalarKind::Md, md_values.clone(), &cluster).expect("MD in range");
        (Some(fa_values), Some(md_values), Some(fa), Some(md))
    } else {
        (None, None, None, None)
    };

    GeneratedCluster {
        lists,
        cluster,
        fa_values,
        md_values,
        fa,
        md,
    }
}

/// Snap to multiples of 2⁻⁸. Dyadic coordinates make translation by whole
/// voxels *bitwise* exact (every intermediate in the descriptor pipeline is
/// identical), which the integer-translation invariance check relies on.
pub fn snap_dyadic(c: f64) -> f64 {
    (c * 256.0).round() / 256.0
}

/// `random_cluster` with every coordinate snapped to the 1/256 grid and the
/// streamline count truncated to a power of two. The truncation matters:
/// end-region centroids divide a coordinate sum by the streamline count, and
/// only a power-of-two divisor keeps that division (and with it every
/// intermediate of the translated recomputation) exact.
pub fn dyadic_cluster(seed: u64) -> GeneratedCluster {
    let g = random_cluster(seed);
    let mut lists = map_lists(&g.lists, |p| {
        [snap_dyadic(p[0]), snap_dyadic(p[1]), snap_dyadic(p[2])]
    });
    let take = 1usize << lists.len().ilog2();
    lists.truncate(take);
    let cluster = FiberCluster::from_points(1, lists.clone()).expect("snapped points are finite");
    GeneratedCluster {
        lists,
        cluster,
        fa_values: None,
        md_values: None,
        fa: None,
        md: None,
    }
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// Floor-convention voxel index (the documented grid contract).
pub fn oracle_index(p: Point3, spacing: f64) -> [i64; 3] {
    [
        (p[0] / spacing).floor() as i64,
        (p[1] / spacing).floor() as i64,
        (p[2] / spacing).floor() as i64,
    ]
}

/// Brute-force voxelization by slab clipping: for every segment, enumerate
/// its voxel bounding box (segments are monotone per axis, so the box
/// contains every candidate) and keep voxels where the clipped parameter
/// interval has positive length; axes the segment is parallel to use the
/// half-open box ownership. Panics when an interval is within 1e-12 of
/// degenerate — the generators keep points off the grid so a borderline
/// case means the generator, not the library, is wrong.
pub fn oracle_voxel_set(lists: &Lists, spacing: f64) -> HashSet<[i64; 3]> {
    let mut out = HashSet::new();
    for points in lists {
        for w in points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (va, vb) = (oracle_index(a, spacing), oracle_index(b, spacing));
            let lo = [va[0].min(vb[0]), va[1].min(vb[1]), va[2].min(vb[2])];
            let hi = [va[0].max(vb[0]), va[1].max(vb[1]), va[2].max(vb[2])];
            for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        let v = [i, j, k];
                        let mut t_enter: f64 = 0.0;
                        let mut t_exit: f64 = 1.0;
                        let mut inside = true;
                        for ax in 0..3 {
                            let d = b[ax] - a[ax];
                            let low = v[ax] as f64 * spacing;
                            let high = (v[ax] + 1) as f64 * spacing;
                            if d == 0.0 {
                                if a[ax] < low || a[ax] >= high {
                                    inside = false;
                                    break;
                                }
                            } else {
                                let (t0, t1) = ((low - a[ax]) / d, (high - a[ax]) / d);
                                let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
                                t_enter = t_enter.max(t0);
                                t_exit = t_exit.min(t1);
                            }
                        }
                        if !inside {
                            continue;
                        }
                        let overlap = t_exit - t_enter;
                        assert!(
                            overlap.abs() > 1e-12,
                            "oracle ambiguity: segment {a:?}->{b:?} grazes voxel {v:?}"
                        );
                        if overlap > 0.0 {
                            out.insert(v);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Occupied voxels with at least one of the six face neighbors empty.
pub fn oracle_surface_count(set: &HashSet<[i64; 3]>) -> usize {
    let neighbors = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    set.iter()
        .filter(|&&v| {
            neighbors
                .iter()
                .any(|d| !set.contains(&[v[0] + d[0], v[1] + d[1], v[2] + d[2]]))
        })
        .count()
}

/// Flip flags: streamline 0 is the reference; flip another streamline iff
/// flipping strictly reduces the sum of endpoint distances to the reference.
pub fn oracle_orientation(lists: &Lists) -> Vec<bool> {
    let rs = lists[0].first().copied().unwrap();
    let re = lists[0].last().copied().unwrap();
    lists
        .iter()
        .map(|pts| {
            let (s, e) = (*pts.first().unwrap(), *pts.last().unwrap());
            dist3(s, rs) + dist3(e, re) > dist3(s, re) + dist3(e, rs)
        })
        .collect()
}

/// Oriented endpoints per streamline: `[start, end]` after applying flips.
pub fn oracle_endpoints(lists: &Lists, flips: &[bool]) -> Vec<[Point3; 2]> {
    lists
        .iter()
        .zip(flips)
        .map(|(pts, &f)| {
            let (s, e) = (*pts.first().unwrap(), *pts.last().unwrap());
            if f {
                [e, s]
            } else {
                [s, e]
            }
        })
        .collect()
}

/// End-disk centroids and radii (1.5 × mean distance to the centroid).
pub fn oracle_end_regions(endpoints: &[[Point3; 2]]) -> ([Point3; 2], [f64; 2]) {
    let n = endpoints.len() as f64;
    let mut centroids = [[0.0; 3]; 2];
    let mut radii = [0.0; 2];
    for e in 0..2 {
        let mut c = [0.0; 3];
        for p in endpoints {
            for ax in 0..3 {
                c[ax] += p[e][ax];
            }
        }
        for x in &mut c {
            *x /= n;
        }
        let mean_dist: f64 = endpoints.iter().map(|p| dist3(p[e], c)).sum::<f64>() / n;
        centroids[e] = c;
        radii[e] = 1.5 * mean_dist;
    }
    (centroids, radii)
}

/// The streamlines whose two oriented endpoints both lie within the
/// respective end disk (inclusive).
pub fn oracle_trunk_lists(
    lists: &Lists,
    endpoints: &[[Point3; 2]],
    centroids: &[Point3; 2],
    radii: &[f64; 2],
) -> Lists {
    lists
        .iter()
        .zip(endpoints)
        .filter(|(_, ep)| {
            dist3(ep[0], centroids[0]) <= radii[0] && dist3(ep[1], centroids[1]) <= radii[1]
        })
        .map(|(pts, _)| pts.clone())
        .collect()
}

pub fn oracle_mean_length(lists: &Lists) -> f64 {
    let sum: f64 = lists
        .iter()
        .map(|pts| pts.windows(2).map(|w| dist3(w[0], w[1])).sum::<f64>())
        .sum();
    sum / lists.len() as f64
}

pub fn oracle_mean_span(lists: &Lists) -> f64 {
    let sum: f64 = lists
        .iter()
        .map(|pts| dist3(*pts.first().unwrap(), *pts.last().unwrap()))
        .sum();
    sum / lists.len() as f64
}

pub fn oracle_flat_mean(values: &[Vec<f64>]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for row in values {
        sum += row.iter().sum::<f64>();
        count += row.len();
    }
    sum / count as f64
}

// ---------------------------------------------------------------------------
// Assertions
// ---------------------------------------------------------------------------

/// Relative comparison against max(|got|, |want|), with an exact fast path.
pub fn assert_rel(name: &str, got: f64, want: f64, tol: f64) {
    if got == want {
        return;
    }
    let rel = (got - want).abs() / got.abs().max(want.abs());
    assert!(
        rel <= tol,
        "{name}: got {got}, oracle {want}, relative error {rel:.3e} > {tol:.1e}"
    );
}

/// Criterion-1 check: every descriptor of one generated cluster against the
/// independent oracles — exact for voxel/streamline counts, 1e-9 relative
/// for analytic quantities.
pub fn check_cluster_oracles(g: &GeneratedCluster, spacing: f64) {
    const TOL: f64 = 1e-9;
    let config = ShapeConfig {
        spacing,
        ..ShapeConfig::default()
    };
    let (d, t) = shape::compute_all(&g.cluster, &config, g.fa.as_ref(), g.md.as_ref());

    // Voxel counts: exact.
    let vs = oracle_voxel_set(&g.lists, spacing);
    assert_eq!(
        d.volume.value,
        vs.len() as f64 * spacing.powi(3),
        "volume != oracle voxel count x spacing^3"
    );
    assert_eq!(
        d.total_surface_area.value,
        oracle_surface_count(&vs) as f64 * spacing * spacing,
        "surface area != oracle surface count x spacing^2"
    );

    // Orientation, end regions, trunk/branch.
    let flips = oracle_orientation(&g.lists);
    assert_eq!(
        shape::orient_streamlines(&g.cluster),
        flips,
        "orientation flags disagree with oracle"
    );
    let endpoints = oracle_endpoints(&g.lists, &flips);
    let (centroids, radii) = oracle_end_regions(&endpoints);
    assert_rel(
        "total_end_region_radius",
        d.total_end_region_radius.value,
        radii[0] + radii[1],
        TOL,
    );
    assert_rel(
        "total_end_region_area",
        d.total_end_region_area.value,
        std::f64::consts::PI * (radii[0] * radii[0] + radii[1] * radii[1]),
        TOL,
    );
    let trunk = oracle_trunk_lists(&g.lists, &endpoints, &centroids, &radii);
    let ts = oracle_voxel_set(&trunk, spacing);
    assert!(
        ts.is_subset(&vs),
        "oracle trunk voxels must be a subset of the cluster voxels"
    );
    assert_eq!(
        d.trunk_volume.value,
        ts.len() as f64 * spacing.powi(3),
        "trunk volume != oracle trunk voxel count x spacing^3"
    );
    assert_eq!(
        d.branch_volume.value,
        d.volume.value - d.trunk_volume.value,
        "branch volume != volume - trunk"
    );

    // Analytic descriptors: 1e-9 relative against recomputed oracles.
    let length = oracle_mean_length(&g.lists);
    let span = oracle_mean_span(&g.lists);
    assert_rel("length", d.length.value, length, TOL);
    assert_rel("span", d.span.value, span, TOL);
    assert_rel("curl", d.curl.value, length / span, TOL);
    let volume = vs.len() as f64 * spacing.powi(3);
    let diameter = (volume / (std::f64::consts::PI * length)).sqrt();
    assert_rel("diameter", d.diameter.value, diameter, TOL);
    assert_rel("elongation", d.elongation.value, length / diameter, TOL);
    let sa = oracle_surface_count(&vs) as f64 * spacing * spacing;
    assert_rel(
        "irregularity",
        d.irregularity.value,
        sa / (std::f64::consts::PI * diameter * length),
        TOL,
    );

    // Validity: generated clusters are non-degenerate.
    for (name, f) in [
        ("length", d.length),
        ("span", d.span),
        ("curl", d.curl),
        ("volume", d.volume),
        ("trunk_volume", d.trunk_volume),
        ("branch_volume", d.branch_volume),
        ("diameter", d.diameter),
        ("elongation", d.elongation),
        ("total_surface_area", d.total_surface_area),
        ("total_end_region_radius", d.total_end_region_radius),
        ("total_end_region_area", d.total_end_region_area),
        ("irregularity", d.irregularity),
    ] {
        assert!(f.valid, "{name} should be valid for a non-degenerate cluster");
    }

    // Traditional features.
    assert_eq!(t.nos, g.lists.len(), "NoS != streamline count");
    match (&g.fa_values, t.fa_mean.valid) {
        (Some(values), true) => assert_rel("fa_mean", t.fa_mean.value, oracle_flat_mean(values), TOL),
        (None, false) => {}
        _ => panic!("fa_mean validity disagrees with map presence"),
    }
    match (&g.md_values, t.md_mean.valid) {
        (Some(values), true) => assert_rel("md_mean", t.md_mean.value, oracle_flat_mean(values), TOL),
        (None, false) => {}
        _ => panic!("md_mean validity disagrees with map presence"),
    }
}

/// The 12 descriptor values in listing order, for whole-vector comparisons.
pub fn descriptor_vec(d: &shape::ShapeDescriptors) -> [f64; 12] {
    [
        d.length.value,
        d.diameter.value,
        d.elongation.value,
        d.span.value,
        d.curl.value,
        d.volume.value,
        d.trunk_volume.value,
        d.branch_volume.value,
        d.total_surface_area.value,
        d.total_end_region_radius.value,
        d.total_end_region_area.value,
        d.irregularity.value,
    ]
}

pub const DESCRIPTOR_NAMES: [&str; 12] = [
    "length",
    "diameter",
    "elongation",
    "span",
    "curl",
    "volume",
    "trunk_volume",
    "branch_volume",
    "total_surface_area",
    "total_end_region_radius",
    "total_end_region_area",
    "irregularity",
];

fn assert_trunk_identity(d: &shape::ShapeDescriptors, what: &str) {
    assert_eq!(
        d.trunk_volume.value + d.branch_volume.value,
        d.volume.value,
        "trunk + branch != volume ({what})"
    );
}

/// Criterion-2 check for one seed: rigid-motion invariance of the analytic
/// descriptors, exact integer-translation invariance, scale covariance, and
/// the exact trunk+branch identity in every case.
pub fn check_invariance(seed: u64) {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x17a);
    let g = random_cluster(seed);
    let cfg = ShapeConfig::default();
    let (base, _) = shape::compute_all(&g.cluster, &cfg, None, None);
    assert_trunk_identity(&base, "base cluster");

    // Rigid motion: rotation + translation leaves the analytic descriptors
    // unchanged to 1e-9 relative.
    let axis = unit([
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0) + 0.05,
    ]);
    let angle: f64 = rng.random_range(0.1..std::f64::consts::TAU);
    let tr: Point3 = [
        rng.random_range(-7.0..7.0),
        rng.random_range(-7.0..7.0),
        rng.random_range(-7.0..7.0),
    ];
    let moved = map_lists(&g.lists, |p| add3(rotate(p, axis, angle), tr));
    let moved_cluster = FiberCluster::from_points(1, moved).unwrap();
    let (md, _) = shape::compute_all(&moved_cluster, &cfg, None, None);
    assert_trunk_identity(&md, "rigid motion");
    for (name, got, want) in [
        ("length", md.length.value, base.length.value),
        ("span", md.span.value, base.span.value),
        ("curl", md.curl.value, base.curl.value),
        (
            "total_end_region_radius",
            md.total_end_region_radius.value,
            base.total_end_region_radius.value,
        ),
        (
            "total_end_region_area",
            md.total_end_region_area.value,
            base.total_end_region_area.value,
        ),
    ] {
        assert_rel(&format!("rigid motion: {name}"), got, want, TOL);
    }

    // Integer-voxel translation: the voxel-based measures are exactly
    // invariant for any cluster ...
    let k: [i64; 3] = [
        rng.random_range(-5..=5),
        rng.random_range(-5..=5),
        rng.random_range(-5..=5),
    ];
    let shift = [k[0] as f64, k[1] as f64, k[2] as f64]; // spacing is 1.0
    let shifted = map_lists(&g.lists, |p| add3(p, shift));
    let shifted_cluster = FiberCluster::from_points(1, shifted).unwrap();
    let (sd, _) = shape::compute_all(&shifted_cluster, &cfg, None, None);
    assert_trunk_identity(&sd, "integer translation");
    for (name, got, want) in [
        ("volume", sd.volume.value, base.volume.value),
        ("trunk_volume", sd.trunk_volume.value, base.trunk_volume.value),
        ("branch_volume", sd.branch_volume.value, base.branch_volume.value),
        (
            "total_surface_area",
            sd.total_surface_area.value,
            base.total_surface_area.value,
        ),
    ] {
        assert_eq!(got, want, "integer translation must leave {name} exactly unchanged");
    }

    // ... and bitwise for the whole vector on a dyadic cluster, where the
    // translated coordinates incur no rounding at all.
    let dg = dyadic_cluster(seed);
    let (dbase, _) = shape::compute_all(&dg.cluster, &cfg, None, None);
    let dshifted = map_lists(&dg.lists, |p| add3(p, shift));
    let dshifted_cluster = FiberCluster::from_points(1, dshifted).unwrap();
    let (dsd, _) = shape::compute_all(&dshifted_cluster, &cfg, None, None);
    assert_trunk_identity(&dsd, "dyadic integer translation");
    for (i, name) in DESCRIPTOR_NAMES.iter().enumerate() {
        let (got, want) = (descriptor_vec(&dsd)[i], descriptor_vec(&dbase)[i]);
        assert!(
            got.to_bits() == want.to_bits(),
            "dyadic integer translation must be bitwise exact for {name}: {got} vs {want}"
        );
    }

    // Scale covariance: coordinates and spacing scaled together multiply
    // lengths by s, areas by s², volumes by s³ and leave the dimensionless
    // descriptors unchanged. Powers of two are bitwise; 1.7 checks a
    // non-representable factor at 1e-9.
    for &s in &[2.0, 0.5, 1.7] {
        let scaled = map_lists(&g.lists, |p| scale3(p, s));
        let scaled_cluster = FiberCluster::from_points(1, scaled).unwrap();
        let scfg = ShapeConfig {
            spacing: cfg.spacing * s,
            ..ShapeConfig::default()
        };
        let (sc, _) = shape::compute_all(&scaled_cluster, &scfg, None, None);
        assert_trunk_identity(&sc, &format!("scale {s}"));
        let s2 = s * s;
        let s3 = s * s * s;
        for (name, got, want) in [
            ("length", sc.length.value, base.length.value * s),
            ("span", sc.span.value, base.span.value * s),
            ("diameter", sc.diameter.value, base.diameter.value * s),
            (
                "total_end_region_radius",
                sc.total_end_region_radius.value,
                base.total_end_region_radius.value * s,
            ),
            (
                "total_end_region_area",
                sc.total_end_region_area.value,
                base.total_end_region_area.value * s2,
            ),
            (
                "total_surface_area",
                sc.total_surface_area.value,
                base.total_surface_area.value * s2,
            ),
            ("volume", sc.volume.value, base.volume.value * s3),
            ("trunk_volume", sc.trunk_volume.value, base.trunk_volume.value * s3),
            ("branch_volume", sc.branch_volume.value, base.branch_volume.value * s3),
            ("curl", sc.curl.value, base.curl.value),
            ("elongation", sc.elongation.value, base.elongation.value),
            ("irregularity", sc.irregularity.value, base.irregularity.value),
        ] {
            if s == 2.0 || s == 0.5 {
                assert!(
                    got.to_bits() == want.to_bits(),
                    "scale {s} must be bitwise covariant for {name}: {got} vs {want}"
                );
            } else {
                assert_rel(&format!("scale {s}: {name}"), got, want, TOL);
            }
        }
    }
}
