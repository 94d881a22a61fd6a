//! Streamline bundle and scalar-map file formats.
//!
//! # SLB (streamline bundle, binary, little-endian)
//!
//! ```text
//! magic   4 bytes  "SLB1"
//! n       u32      streamline count
//! per streamline:
//!   m_i   u32      point count (>= 2)
//!   m_i * 3 f64    x, y, z in mm
//! ```
//!
//! A text twin exists for hand-written fixtures: one streamline per line,
//! points separated by `;`, coordinates by whitespace, `#` starts a comment.
//! [`parse_bundle`] accepts either form (binary is detected by magic) and
//! [`write_bundle`] emits canonical binary bytes, so parse∘write is the
//! identity on valid clusters.
//!
//! # SLS (per-point scalar map, binary, little-endian)
//!
//! ```text
//! magic   4 bytes  "SLS1"
//! n       u32      streamline count (must match the paired cluster)
//! per streamline:
//!   m_i   u32      point count (must match)
//!   m_i * f64      scalar values
//! ```
//!
//! # Subject directory layout
//!
//! ```text
//! <root>/<subject_id>/cluster_%04d.slb   one bundle per atlas cluster
//!                     fa_%04d.sls        optional FA map per cluster
//!                     md_%04d.sls        optional MD map per cluster
//!                     scores.tsv         "assessment<TAB>value" per line
//! ```
//!
//! A missing `cluster_%04d.slb` is not an error: atlas parcellation can leave
//! a cluster empty for a subject, so the loader substitutes an empty cluster
//! with the right id.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// A 3D coordinate in millimeters.
pub type Point3 = [f64; 3];

pub(crate) fn dist(a: Point3, b: Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

const SLB_MAGIC: &[u8; 4] = b"SLB1";
const SLS_MAGIC: &[u8; 4] = b"SLS1";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bad magic at byte {offset}: expected {expected}")]
    BadMagic { offset: usize, expected: &'static str },
    #[error("truncated input at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("non-finite coordinate at byte {offset} (streamline {streamline}, point {point})")]
    NonFiniteCoordinate {
        offset: usize,
        streamline: usize,
        point: usize,
    },
    #[error("streamline {streamline} at byte {offset} has {count} points, need at least 2")]
    TooFewPoints {
        offset: usize,
        streamline: usize,
        count: u32,
    },
    #[error("text bundle line {line}: {msg}")]
    TextSyntax { line: usize, msg: String },
    #[error("scalar map declares {got} streamlines, cluster has {expected}")]
    StreamlineCountMismatch { got: usize, expected: usize },
    #[error("scalar map streamline {streamline} declares {got} points, cluster has {expected}")]
    PointCountMismatch {
        streamline: usize,
        got: usize,
        expected: usize,
    },
    #[error("{kind} value {value} out of range at streamline {streamline}, point {point}")]
    ScalarOutOfRange {
        kind: ScalarKind,
        value: f64,
        streamline: usize,
        point: usize,
    },
    #[error("non-finite scalar at streamline {streamline}, point {point}")]
    NonFiniteScalar { streamline: usize, point: usize },
    #[error("duplicate cluster index {index} in {}", dir.display())]
    DuplicateClusterIndex { index: u32, dir: PathBuf },
    #[error("cluster index {index} outside 1..={max} in {}", dir.display())]
    ClusterIndexOutOfRange { index: u32, max: u32, dir: PathBuf },
    #[error("scores file line {line}: {msg}")]
    ScoresSyntax { line: usize, msg: String },
    #[error("assessment {name:?} missing from scores file")]
    MissingAssessment { name: String },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One tractography streamline: an ordered polyline of at least two finite
/// 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct Streamline {
    points: Vec<Point3>,
}

impl Streamline {
    pub fn new(points: Vec<Point3>) -> Result<Self, BundleError> {
        if points.len() < 2 {
            return Err(BundleError::TooFewPoints {
                offset: 0,
                streamline: 0,
                count: points.len() as u32,
            });
        }
        for (pi, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(BundleError::NonFiniteCoordinate {
                    offset: 0,
                    streamline: 0,
                    point: pi,
                });
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: at least 2 points
    }

    pub fn first(&self) -> Point3 {
        self.points[0]
    }

    pub fn last(&self) -> Point3 {
        self.points[self.points.len() - 1]
    }

    /// Polyline arc length: sum of consecutive point distances.
    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    /// Same polyline traversed end to start.
    pub fn reversed(&self) -> Streamline {
        let mut points = self.points.clone();
        points.reverse();
        Streamline { points }
    }
}

/// One brain connection: a set of streamlines. `n = 0` marks a cluster the
/// atlas defines but this subject does not populate.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberCluster {
    id: u32,
    streamlines: Vec<Streamline>,
}

impl FiberCluster {
    pub fn new(id: u32, streamlines: Vec<Streamline>) -> Self {
        Self { id, streamlines }
    }

    pub fn empty(id: u32) -> Self {
        Self {
            id,
            streamlines: Vec::new(),
        }
    }

    /// Build a cluster from raw point lists, validating each streamline.
    pub fn from_points(id: u32, lists: Vec<Vec<Point3>>) -> Result<Self, BundleError> {
        let streamlines = lists
            .into_iter()
            .map(Streamline::new)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { id, streamlines })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn with_id(mut self, id: u32) -> Self {
        self.id = id;
        self
    }

    pub fn streamlines(&self) -> &[Streamline] {
        &self.streamlines
    }

    /// Number of streamlines (the NoS connectivity feature).
    pub fn n(&self) -> usize {
        self.streamlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streamlines.is_empty()
    }

    pub fn push(&mut self, s: Streamline) {
        self.streamlines.push(s);
    }
}

/// Which tissue microstructure quantity a scalar map carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    Fa,
    Md,
}

impl std::fmt::Display for ScalarKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScalarKind::Fa => write!(f, "FA"),
            ScalarKind::Md => write!(f, "MD"),
        }
    }
}

/// Per-streamline, per-point scalars shape-locked to a cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    kind: ScalarKind,
    values: Vec<Vec<f64>>,
}

impl ScalarMap {
    /// Validates shape against `cluster` and value ranges for `kind`
    /// (FA in [0,1], MD >= 0, everything finite).
    pub fn new(
        kind: ScalarKind,
        values: Vec<Vec<f64>>,
        cluster: &FiberCluster,
    ) -> Result<Self, BundleError> {
        if values.len() != cluster.n() {
            return Err(BundleError::StreamlineCountMismatch {
                got: values.len(),
                expected: cluster.n(),
            });
        }
        for (si, (row, s)) in values.iter().zip(cluster.streamlines()).enumerate() {
            if row.len() != s.len() {
                return Err(BundleError::PointCountMismatch {
                    streamline: si,
                    got: row.len(),
                    expected: s.len(),
                });
            }
            for (pi, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(BundleError::NonFiniteScalar {
                        streamline: si,
                        point: pi,
                    });
                }
                let in_range = match kind {
                    ScalarKind::Fa => (0.0..=1.0).contains(&v),
                    ScalarKind::Md => v >= 0.0,
                };
                if !in_range {
                    return Err(BundleError::ScalarOutOfRange {
                        kind,
                        value: v,
                        streamline: si,
                        point: pi,
                    });
                }
            }
        }
        Ok(Self { kind, values })
    }

    pub fn kind(&self) -> ScalarKind {
        self.kind
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Everything loaded for one subject: the atlas-length cluster list, optional
/// FA/MD maps, and assessment scores.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub subject_id: String,
    pub clusters: Vec<FiberCluster>,
    pub fa: Vec<Option<ScalarMap>>,
    pub md: Vec<Option<ScalarMap>>,
    pub scores: BTreeMap<String, f64>,
}

// ---------------------------------------------------------------------------
// SLB parse / write
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        if self.bytes.len() - self.pos < n {
            return Err(BundleError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, BundleError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parse an SLB byte sequence (binary when it starts with the magic,
/// otherwise the text twin). The cluster id is not stored in the file;
/// callers tag it with [`FiberCluster::with_id`].
pub fn parse_bundle(bytes: &[u8]) -> Result<FiberCluster, BundleError> {
    if bytes.len() >= 4 && &bytes[..4] == SLB_MAGIC {
        parse_bundle_binary(bytes)
    } else if bytes.len() >= 4 && (&bytes[..3] == b"SLB" || &bytes[..3] == b"SLS") {
        Err(BundleError::BadMagic {
            offset: 0,
            expected: "SLB1",
        })
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| BundleError::BadMagic {
            offset: 0,
            expected: "SLB1 or UTF-8 text",
        })?;
        parse_bundle_text(text)
    }
}

fn parse_bundle_binary(bytes: &[u8]) -> Result<FiberCluster, BundleError> {
    let mut cur = Cursor { bytes, pos: 4 };
    let n = cur.u32()? as usize;
    let mut streamlines = Vec::with_capacity(n);
    for si in 0..n {
        let count_offset = cur.pos;
        let m = cur.u32()?;
        if m < 2 {
            return Err(BundleError::TooFewPoints {
                offset: count_offset,
                streamline: si,
                count: m,
            });
        }
        let mut points = Vec::with_capacity(m as usize);
        for pi in 0..m as usize {
            let point_offset = cur.pos;
            let p = [cur.f64()?, cur.f64()?, cur.f64()?];
            if !p.iter().all(|c| c.is_finite()) {
                return Err(BundleError::NonFiniteCoordinate {
                    offset: point_offset,
                    streamline: si,
                    point: pi,
                });
            }
            points.push(p);
        }
        streamlines.push(Streamline { points });
    }
    Ok(FiberCluster::new(0, streamlines))
}

fn parse_bundle_text(text: &str) -> Result<FiberCluster, BundleError> {
    let mut streamlines = Vec::new();
    for (li, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let si = streamlines.len();
        let mut points = Vec::new();
        for (pi, chunk) in line.split(';').enumerate() {
            let fields: Vec<&str> = chunk.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(BundleError::TextSyntax {
                    line: li + 1,
                    msg: format!("point {} has {} coordinates, expected 3", pi, fields.len()),
                });
            }
            let mut p = [0.0; 3];
            for (c, field) in fields.iter().enumerate() {
                p[c] = field.parse::<f64>().map_err(|e| BundleError::TextSyntax {
                    line: li + 1,
                    msg: format!("bad coordinate {field:?}: {e}"),
                })?;
            }
            if !p.iter().all(|c| c.is_finite()) {
                return Err(BundleError::NonFiniteCoordinate {
                    offset: 0,
                    streamline: si,
                    point: pi,
                });
            }
            points.push(p);
        }
        if points.len() < 2 {
            return Err(BundleError::TooFewPoints {
                offset: 0,
                streamline: si,
                count: points.len() as u32,
            });
        }
        streamlines.push(Streamline { points });
    }
    Ok(FiberCluster::new(0, streamlines))
}

/// Canonical binary SLB bytes; exact inverse of [`parse_bundle`].
pub fn write_bundle(cluster: &FiberCluster) -> Vec<u8> {
    let total_points: usize = cluster.streamlines().iter().map(|s| s.len()).sum();
    let mut out = Vec::with_capacity(8 + cluster.n() * 4 + total_points * 24);
    out.extend_from_slice(SLB_MAGIC);
    out.extend_from_slice(&(cluster.n() as u32).to_le_bytes());
    for s in cluster.streamlines() {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for p in s.points() {
            for c in p {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    out
}

/// Text-twin rendering, full precision (coordinates round-trip exactly).
pub fn write_bundle_text(cluster: &FiberCluster) -> String {
    let mut out = String::new();
    for s in cluster.streamlines() {
        let mut first = true;
        for p in s.points() {
            if !first {
                out.push_str("; ");
            }
            first = false;
            let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// SLS parse / write
// ---------------------------------------------------------------------------

/// Parse an SLS scalar file and shape-lock it against `cluster`.
pub fn parse_scalar_map(
    bytes: &[u8],
    cluster: &FiberCluster,
    kind: ScalarKind,
) -> Result<ScalarMap, BundleError> {
    if bytes.len() < 4 || &bytes[..4] != SLS_MAGIC {
        return Err(BundleError::BadMagic {
            offset: 0,
            expected: "SLS1",
        });
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let n = cur.u32()? as usize;
    if n != cluster.n() {
        return Err(BundleError::StreamlineCountMismatch {
            got: n,
            expected: cluster.n(),
        });
    }
    let mut values = Vec::with_capacity(n);
    for si in 0..n {
        let m = cur.u32()? as usize;
        let expected = cluster.streamlines()[si].len();
        if m != expected {
            return Err(BundleError::PointCountMismatch {
                streamline: si,
                got: m,
                expected,
            });
        }
        let mut row = Vec::with_capacity(m);
        for _ in 0..m {
            row.push(cur.f64()?);
        }
        values.push(row);
    }
    ScalarMap::new(kind, values, cluster)
}

/// Canonical binary SLS bytes; exact inverse of [`parse_scalar_map`].
pub fn write_scalar_map(map: &ScalarMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SLS_MAGIC);
    out.extend_from_slice(&(map.values.len() as u32).to_le_bytes());
    for row in &map.values {
        out.extend_from_slice(&(row.len() as u32).to_le_bytes());
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// Parse a scores file: one `assessment_name<TAB>value` per line.
pub fn parse_scores(text: &str) -> Result<BTreeMap<String, f64>, BundleError> {
    let mut scores = BTreeMap::new();
    for (li, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, value) = line.split_once('\t').ok_or_else(|| BundleError::ScoresSyntax {
            line: li + 1,
            msg: "expected assessment_name<TAB>value".into(),
        })?;
        let value: f64 = value.trim().parse().map_err(|e| BundleError::ScoresSyntax {
            line: li + 1,
            msg: format!("bad score value {value:?}: {e}"),
        })?;
        scores.insert(name.to_string(), value);
    }
    Ok(scores)
}

pub fn write_scores(scores: &BTreeMap<String, f64>) -> String {
    let mut out = String::new();
    for (name, value) in scores {
        let _ = writeln!(out, "{name}\t{value}");
    }
    out
}

// ---------------------------------------------------------------------------
// Subject loading
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> Result<Vec<u8>, BundleError> {
    std::fs::read(path).map_err(|source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Scan `dir` for files named `<prefix>_<index>.<ext>`, rejecting duplicate
/// or out-of-range indices.
fn indexed_files(
    dir: &Path,
    prefix: &str,
    ext: &str,
    max: u32,
) -> Result<BTreeMap<u32, PathBuf>, BundleError> {
    let mut found = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|source| BundleError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| BundleError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(stem) = name
            .strip_prefix(prefix)
            .and_then(|s| s.strip_prefix('_'))
            .and_then(|s| s.strip_suffix(ext))
            .and_then(|s| s.strip_suffix('.'))
        else {
            continue;
        };
        let Ok(index) = stem.parse::<u32>() else { continue };
        if index == 0 || index > max {
            return Err(BundleError::ClusterIndexOutOfRange {
                index,
                max,
                dir: dir.to_path_buf(),
            });
        }
        if found.insert(index, entry.path()).is_some() {
            return Err(BundleError::DuplicateClusterIndex {
                index,
                dir: dir.to_path_buf(),
            });
        }
    }
    Ok(found)
}

/// Load one subject directory. Absent cluster files become empty clusters;
/// FA/MD maps are optional per cluster; every assessment in `assessments`
/// must appear in `scores.tsv`.
pub fn load_subject(
    dir: &Path,
    cluster_count: u32,
    assessments: &[String],
) -> Result<SubjectData, BundleError> {
    let subject_id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let cluster_files = indexed_files(dir, "cluster", "slb", cluster_count)?;
    let fa_files = indexed_files(dir, "fa", "sls", cluster_count)?;
    let md_files = indexed_files(dir, "md", "sls", cluster_count)?;

    let mut clusters = Vec::with_capacity(cluster_count as usize);
    let mut fa = Vec::with_capacity(cluster_count as usize);
    let mut md = Vec::with_capacity(cluster_count as usize);
    for id in 1..=cluster_count {
        let cluster = match cluster_files.get(&id) {
            Some(path) => parse_bundle(&read_file(path)?)?.with_id(id),
            None => FiberCluster::empty(id),
        };
        fa.push(match fa_files.get(&id) {
            Some(path) => Some(parse_scalar_map(&read_file(path)?, &cluster, ScalarKind::Fa)?),
            None => None,
        });
        md.push(match md_files.get(&id) {
            Some(path) => Some(parse_scalar_map(&read_file(path)?, &cluster, ScalarKind::Md)?),
            None => None,
        });
        clusters.push(cluster);
    }

    let scores_path = dir.join("scores.tsv");
    let scores = if scores_path.exists() {
        parse_scores(&String::from_utf8_lossy(&read_file(&scores_path)?))?
    } else if assessments.is_empty() {
        BTreeMap::new()
    } else {
        return Err(BundleError::Io {
            path: scores_path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "scores.tsv not found"),
        });
    };
    for name in assessments {
        if !scores.contains_key(name) {
            return Err(BundleError::MissingAssessment { name: name.clone() });
        }
    }

    Ok(SubjectData {
        subject_id,
        clusters,
        fa,
        md,
        scores,
    })
}

/// File name for cluster `id` in a subject directory.
pub fn cluster_file_name(id: u32) -> String {
    format!("cluster_{id:04}.slb")
}

pub fn fa_file_name(id: u32) -> String {
    format!("fa_{id:04}.sls")
}

pub fn md_file_name(id: u32) -> String {
    format!("md_{id:04}.sls")
}
