//! Synthetic subject generation for desk-scale verification.
//!
//! Produces subject directories in the on-disk layout the loader expects
//! (`cluster_NNNN.slb`, optional `fa_NNNN.sls`/`md_NNNN.sls`, `scores.tsv`)
//! plus a `manifest.json` recording the true per-subject descriptor
//! aggregates, the target rules, and every noise draw — with `noise_sigma`
//! of 0 the scores are exactly recomputable from the manifest.
//!
//! Geometry families: straight rods (streamlines exactly collinear, so curl
//! is 1 to machine precision), circular arcs, and helices. Each subject
//! draws three independent geometry factors — a tube-radius scale, a length
//! scale, and a stray-streamline fraction — so that volume
//! (~ radius²·length) decorrelates from diameter (~ radius), length,
//! surface area, and the trunk/end-region descriptors across the cohort;
//! per-cluster factors jitter around the subject scale. Strays are rigid
//! translations of the base curve to 2.5–4× the tube radius: they widen the
//! end regions and fall outside the trunk without changing per-streamline
//! length, span, or curvature. Targets are weighted sums of cohort-z-scored
//! per-subject mean descriptors plus optional Gaussian noise.
//!
//! All randomness is derived from (seed, tag, indices) hash chains, never
//! from execution order, so generation is deterministic under any thread
//! count and `same seed → identical directory tree` holds byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitBall, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{
    cluster_file_name, fa_file_name, md_file_name, write_bundle, write_scalar_map, write_scores,
    BundleError, FiberCluster, Point3, ScalarKind, ScalarMap, SubjectData,
};
use crate::matrix::{self, FeatureKind};
use crate::model::splitmix64;
use crate::par;
use crate::shape::ShapeConfig;

const TAG_SUBJECT: u64 = 0x51;
const TAG_GEOMETRY: u64 = 0x52;
const TAG_NOISE: u64 = 0x53;

fn mix(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ splitmix64(a)) ^ splitmix64(b))
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {what}")]
    InvalidSpec { what: String },
    #[error("target rule {rule:?} weights non-shape feature {kind}")]
    NonShapeWeight { rule: String, kind: FeatureKind },
    #[error("duplicate target rule name {name:?}")]
    DuplicateTarget { name: String },
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Streamline geometry family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryFamily {
    Rods,
    Arcs,
    Helices,
}

impl GeometryFamily {
    pub fn name(self) -> &'static str {
        match self {
            GeometryFamily::Rods => "rods",
            GeometryFamily::Arcs => "arcs",
            GeometryFamily::Helices => "helices",
        }
    }
}

impl std::fmt::Display for GeometryFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GeometryFamily {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, SynthError> {
        match s {
            "rods" => Ok(GeometryFamily::Rods),
            "arcs" => Ok(GeometryFamily::Arcs),
            "helices" => Ok(GeometryFamily::Helices),
            other => Err(SynthError::InvalidSpec {
                what: format!("unknown geometry family {other:?} (rods|arcs|helices)"),
            }),
        }
    }
}

/// One named assessment: weighted sum of cohort-z-scored per-subject mean
/// descriptors, plus Gaussian noise of width `noise_sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRule {
    pub name: String,
    pub weights: Vec<(FeatureKind, f64)>,
    pub noise_sigma: f64,
}

/// Generation recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub subjects: usize,
    pub clusters: usize,
    /// Nominal streamlines per cluster; actual counts vary by ±2 (min 3).
    pub streamlines: usize,
    pub family: GeometryFamily,
    pub targets: Vec<TargetRule>,
    pub seed: u64,
    pub spacing: f64,
    /// Also emit synthetic FA/MD maps per cluster.
    pub with_scalar_maps: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 12,
            clusters: 4,
            streamlines: 32,
            family: GeometryFamily::Rods,
            targets: vec![TargetRule {
                name: "SYNTH".to_string(),
                weights: vec![(FeatureKind::Volume, 1.0)],
                noise_sigma: 0.0,
            }],
            seed: 0,
            spacing: 1.0,
            with_scalar_maps: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |what: &str| -> Result<(), SynthError> {
            Err(SynthError::InvalidSpec {
                what: what.to_string(),
            })
        };
        if self.subjects < 6 {
            return fail(&format!("need at least 6 subjects, got {}", self.subjects));
        }
        if self.clusters < 2 {
            return fail(&format!("need at least 2 clusters, got {}", self.clusters));
        }
        if self.streamlines < 3 {
            return fail(&format!(
                "need at least 3 streamlines per cluster, got {}",
                self.streamlines
            ));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return fail(&format!("spacing must be positive, got {}", self.spacing));
        }
        let mut seen = std::collections::BTreeSet::new();
        for rule in &self.targets {
            if rule.name.is_empty() {
                return fail("target rule name must be non-empty");
            }
            if !seen.insert(rule.name.clone()) {
                return Err(SynthError::DuplicateTarget {
                    name: rule.name.clone(),
                });
            }
            if !(rule.noise_sigma.is_finite() && rule.noise_sigma >= 0.0) {
                return fail(&format!(
                    "noise sigma for {:?} must be ≥ 0, got {}",
                    rule.name, rule.noise_sigma
                ));
            }
            if rule.weights.is_empty() {
                return fail(&format!("target rule {:?} has no weights", rule.name));
            }
            for &(kind, w) in &rule.weights {
                if !FeatureKind::SHAPE.contains(&kind) {
                    return Err(SynthError::NonShapeWeight {
                        rule: rule.name.clone(),
                        kind,
                    });
                }
                if !w.is_finite() {
                    return fail(&format!("weight for {kind} in {:?} not finite", rule.name));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale3(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Point3) -> Point3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Orthonormal (u, v) spanning the plane perpendicular to unit vector `w`.
fn plane_basis(w: Point3) -> (Point3, Point3) {
    let pick = if w[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = normalize(cross(w, pick));
    let v = cross(w, u);
    (u, v)
}

/// Per-subject latent factors: independent tube-radius, length, and
/// stray-fraction scales plus FA/MD baselines. Three independent geometry
/// factors keep the 12 descriptors mutually distinguishable across a cohort
/// (volume is not a monotone function of surface area, trunk volume, or any
/// other single descriptor), which planted-feature recovery tests rely on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SubjectScales {
    pub radius_scale: f64,
    pub length_scale: f64,
    /// Fraction of streamlines translated far off the bundle core. Strays
    /// widen the end regions and are excluded from the trunk, so trunk and
    /// end-region descriptors carry signal independent of radius/length.
    pub stray_frac: f64,
    pub fa_base: f64,
    pub md_base: f64,
}

fn subject_scales(spec: &SynthSpec, s: usize) -> SubjectScales {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, TAG_SUBJECT, s as u64, 0));
    SubjectScales {
        radius_scale: rng.random_range(0.7..=1.5),
        length_scale: rng.random_range(0.7..=1.5),
        stray_frac: rng.random_range(0.05..=0.35),
        fa_base: rng.random_range(0.35..=0.75),
        md_base: rng.random_range(5e-4..=9e-4),
    }
}

/// Generate cluster `c` (0-based) of subject `s`; the stored cluster id is
/// `c + 1`. Optionally fills FA/MD maps.
fn generate_cluster(
    spec: &SynthSpec,
    scales: &SubjectScales,
    s: usize,
    c: usize,
) -> (FiberCluster, Option<ScalarMap>, Option<ScalarMap>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, TAG_GEOMETRY, s as u64, c as u64));

    // Several voxels thick at the default spacing so tubes have genuine
    // interiors: surface area then grows more slowly with radius than
    // volume does, keeping the two descriptors distinguishable.
    let tube_r = 3.0 * scales.radius_scale * rng.random_range(0.8..=1.2) * spec.spacing;
    let arc_len = 24.0 * scales.length_scale * rng.random_range(0.8..=1.2) * spec.spacing;
    let n_streamlines =
        ((spec.streamlines as i64) + rng.random_range(-2i64..=2)).max(3) as usize;
    let n_pts: usize = rng.random_range(24..=30);

    let center: Point3 = [
        rng.random_range(-20.0..=20.0) * spec.spacing,
        rng.random_range(-20.0..=20.0) * spec.spacing,
        rng.random_range(-20.0..=20.0) * spec.spacing,
    ];
    let w: Point3 = UnitSphere.sample(&mut rng);
    let (u, v) = plane_basis(w);

    let mut lists: Vec<Vec<Point3>> = Vec::with_capacity(n_streamlines);
    match spec.family {
        GeometryFamily::Rods => {
            for _ in 0..n_streamlines {
                // Constant offset in the cross-sectional disk keeps every
                // streamline exactly collinear: curl is 1 to machine
                // precision. Strays land in a wider disk but stay parallel.
                let spread = if rng.random::<f64>() < scales.stray_frac {
                    rng.random_range(2.5..=4.0)
                } else {
                    1.0
                };
                let rho = tube_r * spread * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let off = add(scale3(u, rho * phi.cos()), scale3(v, rho * phi.sin()));
                let start = add(add(center, off), scale3(w, -arc_len / 2.0));
                let pts = (0..n_pts)
                    .map(|i| {
                        let t = arc_len * i as f64 / (n_pts - 1) as f64;
                        add(start, scale3(w, t))
                    })
                    .collect();
                lists.push(pts);
            }
        }
        GeometryFamily::Arcs => {
            let theta = rng.random_range(0.8..=2.4);
            let radius = arc_len / theta;
            let phi0 = rng.random_range(0.0..std::f64::consts::TAU);
            for _ in 0..n_streamlines {
                // A constant offset rigidly translates the arc, so strays
                // keep the same curvature while spreading the endpoints.
                let spread = if rng.random::<f64>() < scales.stray_frac {
                    rng.random_range(2.5..=4.0)
                } else {
                    1.0
                };
                let ball: Point3 = UnitBall.sample(&mut rng);
                let off = scale3(ball, tube_r * spread);
                let jit = 0.02 * tube_r;
                let pts = (0..n_pts)
                    .map(|i| {
                        let t = phi0 + theta * i as f64 / (n_pts - 1) as f64;
                        let on_circle = add(
                            center,
                            add(scale3(u, radius * t.cos()), scale3(v, radius * t.sin())),
                        );
                        let jitter = [
                            jit * rng.random_range(-1.0..=1.0),
                            jit * rng.random_range(-1.0..=1.0),
                            jit * rng.random_range(-1.0..=1.0),
                        ];
                        add(add(on_circle, off), jitter)
                    })
                    .collect();
                lists.push(pts);
            }
        }
        GeometryFamily::Helices => {
            let turns = rng.random_range(0.6..=1.8);
            let t_span = std::f64::consts::TAU * turns;
            let helix_r = arc_len / t_span * rng.random_range(0.8..=1.2);
            let height = 0.5 * arc_len;
            for _ in 0..n_streamlines {
                let spread = if rng.random::<f64>() < scales.stray_frac {
                    rng.random_range(2.5..=4.0)
                } else {
                    1.0
                };
                let ball: Point3 = UnitBall.sample(&mut rng);
                let off = scale3(ball, tube_r * spread);
                let jit = 0.02 * tube_r;
                let pts = (0..n_pts)
                    .map(|i| {
                        let t = t_span * i as f64 / (n_pts - 1) as f64;
                        let coil = add(
                            add(scale3(u, helix_r * t.cos()), scale3(v, helix_r * t.sin())),
                            scale3(w, height * t / t_span),
                        );
                        let jitter = [
                            jit * rng.random_range(-1.0..=1.0),
                            jit * rng.random_range(-1.0..=1.0),
                            jit * rng.random_range(-1.0..=1.0),
                        ];
                        add(add(center, coil), add(off, jitter))
                    })
                    .collect();
                lists.push(pts);
            }
        }
    }

    let cluster = FiberCluster::from_points((c + 1) as u32, lists).expect("generated points are finite");

    let (fa, md) = if spec.with_scalar_maps {
        let fa_vals: Vec<Vec<f64>> = cluster
            .streamlines()
            .iter()
            .map(|sl| {
                (0..sl.len())
                    .map(|_| (scales.fa_base + 0.06 * rng.random_range(-1.0..=1.0)).clamp(0.05, 0.95))
                    .collect()
            })
            .collect();
        let md_vals: Vec<Vec<f64>> = cluster
            .streamlines()
            .iter()
            .map(|sl| {
                (0..sl.len())
                    .map(|_| scales.md_base + 4e-5 * rng.random_range(-1.0..=1.0))
                    .collect()
            })
            .collect();
        (
            Some(ScalarMap::new(ScalarKind::Fa, fa_vals, &cluster).expect("FA values in range")),
            Some(ScalarMap::new(ScalarKind::Md, md_vals, &cluster).expect("MD values in range")),
        )
    } else {
        (None, None)
    };
    (cluster, fa, md)
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

/// Cohort mean/std of one descriptor (population, std-0 guarded to 1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DescriptorStats {
    pub mean: f64,
    pub std: f64,
}

/// Ground truth for one generated subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectManifest {
    pub id: String,
    pub scales: SubjectScales,
    /// Mean over clusters of each of the 12 shape descriptors.
    pub descriptor_means: BTreeMap<String, f64>,
    /// Noise draw per target rule (exactly 0 when noise_sigma is 0).
    pub noise: BTreeMap<String, f64>,
    pub scores: BTreeMap<String, f64>,
}

/// Everything needed to audit or exactly reproduce the generated scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub stats: BTreeMap<String, DescriptorStats>,
    pub subjects: Vec<SubjectManifest>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// A generated cohort, in memory.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub subjects: Vec<SubjectData>,
    pub manifest: Manifest,
}

pub fn subject_id(s: usize) -> String {
    format!("sub-{s:03}")
}

/// Generate the full cohort: geometry, per-subject descriptor aggregates,
/// and rule-based scores.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let shape_config = ShapeConfig {
        spacing: spec.spacing,
        ..ShapeConfig::default()
    };

    let all_scales: Vec<SubjectScales> =
        (0..spec.subjects).map(|s| subject_scales(spec, s)).collect();

    let mut subjects: Vec<SubjectData> = par::map_indices(spec.subjects, |s| {
        let mut clusters = Vec::with_capacity(spec.clusters);
        let mut fa = Vec::with_capacity(spec.clusters);
        let mut md = Vec::with_capacity(spec.clusters);
        for c in 0..spec.clusters {
            let (cluster, f, m) = generate_cluster(spec, &all_scales[s], s, c);
            clusters.push(cluster);
            fa.push(f);
            md.push(m);
        }
        SubjectData {
            subject_id: subject_id(s),
            clusters,
            fa,
            md,
            scores: BTreeMap::new(),
        }
    });

    // Per-subject mean of each shape descriptor over clusters.
    let feature_rows = par::map_slice(&subjects, |subj| {
        matrix::extract_features(subj, &shape_config)
    });
    let means: Vec<BTreeMap<String, f64>> = feature_rows
        .iter()
        .map(|sf| {
            FeatureKind::SHAPE
                .iter()
                .map(|&kind| {
                    let sum: f64 = sf.rows.iter().map(|r| r.values[kind.index()]).sum();
                    (kind.name().to_string(), sum / sf.rows.len() as f64)
                })
                .collect()
        })
        .collect();

    let n = spec.subjects as f64;
    let stats: BTreeMap<String, DescriptorStats> = FeatureKind::SHAPE
        .iter()
        .map(|&kind| {
            let name = kind.name();
            let mean = means.iter().map(|m| m[name]).sum::<f64>() / n;
            let var = means.iter().map(|m| (m[name] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            (
                name.to_string(),
                DescriptorStats {
                    mean,
                    std: if std == 0.0 { 1.0 } else { std },
                },
            )
        })
        .collect();

    let mut subject_manifests = Vec::with_capacity(spec.subjects);
    for (s, subject) in subjects.iter_mut().enumerate() {
        let mut noise_log = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for (ri, rule) in spec.targets.iter().enumerate() {
            let zsum: f64 = rule
                .weights
                .iter()
                .map(|&(kind, w)| {
                    let st = &stats[kind.name()];
                    w * (means[s][kind.name()] - st.mean) / st.std
                })
                .sum();
            let noise = if rule.noise_sigma > 0.0 {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix(spec.seed, TAG_NOISE, ri as u64, s as u64));
                let normal = Normal::new(0.0, rule.noise_sigma).expect("sigma validated");
                normal.sample(&mut rng)
            } else {
                0.0
            };
            noise_log.insert(rule.name.clone(), noise);
            scores.insert(rule.name.clone(), zsum + noise);
        }
        subject.scores = scores.clone();
        subject_manifests.push(SubjectManifest {
            id: subject.subject_id.clone(),
            scales: all_scales[s],
            descriptor_means: means[s].clone(),
            noise: noise_log,
            scores,
        });
    }

    Ok(SynthDataset {
        subjects,
        manifest: Manifest {
            spec: spec.clone(),
            stats,
            subjects: subject_manifests,
        },
    })
}

/// Write the cohort as subject directories plus `manifest.json` under `root`.
pub fn write_dataset(dataset: &SynthDataset, root: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    for subject in &dataset.subjects {
        let dir = root.join(&subject.subject_id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for (ci, cluster) in subject.clusters.iter().enumerate() {
            let path = dir.join(cluster_file_name(cluster.id()));
            fs::write(&path, write_bundle(cluster)).map_err(|e| io_err(&path, e))?;
            if let Some(fa) = &subject.fa[ci] {
                let path = dir.join(fa_file_name(cluster.id()));
                fs::write(&path, write_scalar_map(fa)).map_err(|e| io_err(&path, e))?;
            }
            if let Some(md) = &subject.md[ci] {
                let path = dir.join(md_file_name(cluster.id()));
                fs::write(&path, write_scalar_map(md)).map_err(|e| io_err(&path, e))?;
            }
        }
        let path = dir.join("scores.tsv");
        let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        file.write_all(write_scores(&subject.scores).as_bytes())
            .map_err(|e| io_err(&path, e))?;
    }
    let path = root.join("manifest.json");
    let mut json = dataset.manifest.to_json();
    json.push('\n');
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Generate and write in one step.
pub fn generate_into(spec: &SynthSpec, root: &Path) -> Result<SynthDataset, SynthError> {
    let dataset = generate(spec)?;
    write_dataset(&dataset, root)?;
    Ok(dataset)
}
