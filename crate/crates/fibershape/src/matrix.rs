//! Subject × cluster feature matrices and their normalization.
//!
//! One matrix holds one feature kind (e.g. volume) for all subjects: row s,
//! column c = that feature of subject s's cluster c+1, zero-filled where the
//! cluster is empty. Normalization is a per-column z-score whose statistics
//! are fit on an explicit training row set only — validation rows never touch
//! the stats.
//!
//! # Wide CSV (one file per feature kind)
//!
//! ```text
//! subject_id,c0001,c0002,...       header, C cluster columns
//! sub01,12.5,0,...                 full-precision decimal values
//! ```
//!
//! # scores.csv
//!
//! ```text
//! subject_id,SYNTH,TPVT            sorted assessment names
//! sub01,1.25,100
//! ```
//!
//! Fold index files are plain line-separated subject ids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::SubjectData;
use crate::par;
use crate::shape::{self, ShapeConfig};

/// The 15 per-cluster features: the 12 shape descriptors in their canonical
/// listing order, then the traditional FA/MD/NoS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Length,
    Diameter,
    Elongation,
    Span,
    Curl,
    Volume,
    TrunkVolume,
    BranchVolume,
    TotalSurfaceArea,
    TotalEndRegionRadius,
    TotalEndRegionArea,
    Irregularity,
    Fa,
    Md,
    Nos,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 15] = [
        FeatureKind::Length,
        FeatureKind::Diameter,
        FeatureKind::Elongation,
        FeatureKind::Span,
        FeatureKind::Curl,
        FeatureKind::Volume,
        FeatureKind::TrunkVolume,
        FeatureKind::BranchVolume,
        FeatureKind::TotalSurfaceArea,
        FeatureKind::TotalEndRegionRadius,
        FeatureKind::TotalEndRegionArea,
        FeatureKind::Irregularity,
        FeatureKind::Fa,
        FeatureKind::Md,
        FeatureKind::Nos,
    ];

    /// The 12 shape kinds, in listing order (the helper-selection tie-break
    /// prefers lower indices here).
    pub const SHAPE: [FeatureKind; 12] = [
        FeatureKind::Length,
        FeatureKind::Diameter,
        FeatureKind::Elongation,
        FeatureKind::Span,
        FeatureKind::Curl,
        FeatureKind::Volume,
        FeatureKind::TrunkVolume,
        FeatureKind::BranchVolume,
        FeatureKind::TotalSurfaceArea,
        FeatureKind::TotalEndRegionRadius,
        FeatureKind::TotalEndRegionArea,
        FeatureKind::Irregularity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Length => "length",
            FeatureKind::Diameter => "diameter",
            FeatureKind::Elongation => "elongation",
            FeatureKind::Span => "span",
            FeatureKind::Curl => "curl",
            FeatureKind::Volume => "volume",
            FeatureKind::TrunkVolume => "trunk_volume",
            FeatureKind::BranchVolume => "branch_volume",
            FeatureKind::TotalSurfaceArea => "total_surface_area",
            FeatureKind::TotalEndRegionRadius => "total_end_region_radius",
            FeatureKind::TotalEndRegionArea => "total_end_region_area",
            FeatureKind::Irregularity => "irregularity",
            FeatureKind::Fa => "fa",
            FeatureKind::Md => "md",
            FeatureKind::Nos => "nos",
        }
    }

    /// Position in [`FeatureKind::ALL`].
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = MatrixError;

    fn from_str(s: &str) -> Result<Self, MatrixError> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| MatrixError::UnknownFeature { name: s.to_string() })
    }
}

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("unknown feature kind {name:?}")]
    UnknownFeature { name: String },
    #[error("subject {subject} has {got} clusters, expected {expected}")]
    InconsistentClusterCount {
        subject: String,
        got: usize,
        expected: usize,
    },
    #[error("subject {subject} is missing assessment {name:?}")]
    MissingAssessment { subject: String, name: String },
    #[error("non-finite {kind} for subject {subject}, cluster column {column}")]
    NonFinite {
        kind: FeatureKind,
        subject: String,
        column: usize,
    },
    #[error("need at least 2 training rows, got {got}")]
    TooFewTrainRows { got: usize },
    #[error("training row index {index} out of range for {rows} rows")]
    TrainRowOutOfRange { index: usize, rows: usize },
    #[error("stats have {got} columns, matrix has {expected}")]
    StatsShapeMismatch { got: usize, expected: usize },
    #[error("{path} line {line}: {msg}")]
    Csv {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> MatrixError {
    MatrixError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// All 15 features of one cluster; invalid entries hold 0.0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRow {
    pub values: [f64; 15],
    pub valid: [bool; 15],
}

impl FeatureRow {
    pub fn get(&self, kind: FeatureKind) -> f64 {
        self.values[kind.index()]
    }
}

/// Per-cluster feature rows plus the subject's assessment scores.
#[derive(Debug, Clone)]
pub struct SubjectFeatures {
    pub subject_id: String,
    pub rows: Vec<FeatureRow>,
    pub scores: BTreeMap<String, f64>,
}

/// Compute every feature of every cluster of one subject (parallel across
/// clusters under the `parallel` feature).
pub fn extract_features(subject: &SubjectData, config: &ShapeConfig) -> SubjectFeatures {
    let rows = par::map_indices(subject.clusters.len(), |ci| {
        let cluster = &subject.clusters[ci];
        let (d, t) = shape::compute_all(
            cluster,
            config,
            subject.fa[ci].as_ref(),
            subject.md[ci].as_ref(),
        );
        let feats = [
            d.length,
            d.diameter,
            d.elongation,
            d.span,
            d.curl,
            d.volume,
            d.trunk_volume,
            d.branch_volume,
            d.total_surface_area,
            d.total_end_region_radius,
            d.total_end_region_area,
            d.irregularity,
            t.fa_mean,
            t.md_mean,
            shape::Feature::valid(t.nos as f64),
        ];
        FeatureRow {
            values: feats.map(|f| f.value),
            valid: feats.map(|f| f.valid),
        }
    });
    SubjectFeatures {
        subject_id: subject.subject_id.clone(),
        rows,
        scores: subject.scores.clone(),
    }
}

/// Per-column mean/std pairs fit on a training row subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// One feature kind over all subjects: S×C values plus the target score.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub kind: FeatureKind,
    pub subject_ids: Vec<String>,
    pub n_clusters: usize,
    pub values: Vec<f64>,
    pub target: Vec<f64>,
    /// Stats the values were normalized with, if [`zscore_apply`] produced
    /// this matrix.
    pub norm: Option<ColumnStats>,
}

impl FeatureMatrix {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_clusters..(s + 1) * self.n_clusters]
    }

    pub fn get(&self, s: usize, c: usize) -> f64 {
        self.values[s * self.n_clusters + c]
    }
}

/// Build the S×C matrix of `kind` with `assessment` as the target.
pub fn assemble(
    features: &[SubjectFeatures],
    kind: FeatureKind,
    assessment: &str,
) -> Result<FeatureMatrix, MatrixError> {
    let n_clusters = features.first().map_or(0, |f| f.rows.len());
    let mut subject_ids = Vec::with_capacity(features.len());
    let mut values = Vec::with_capacity(features.len() * n_clusters);
    let mut target = Vec::with_capacity(features.len());
    for f in features {
        if f.rows.len() != n_clusters {
            return Err(MatrixError::InconsistentClusterCount {
                subject: f.subject_id.clone(),
                got: f.rows.len(),
                expected: n_clusters,
            });
        }
        let score = *f.scores.get(assessment).ok_or_else(|| {
            MatrixError::MissingAssessment {
                subject: f.subject_id.clone(),
                name: assessment.to_string(),
            }
        })?;
        for (ci, row) in f.rows.iter().enumerate() {
            let v = row.get(kind);
            if !v.is_finite() {
                return Err(MatrixError::NonFinite {
                    kind,
                    subject: f.subject_id.clone(),
                    column: ci,
                });
            }
            values.push(v);
        }
        subject_ids.push(f.subject_id.clone());
        target.push(score);
    }
    Ok(FeatureMatrix {
        kind,
        subject_ids,
        n_clusters,
        values,
        target,
        norm: None,
    })
}

/// Population mean/std per column over the training rows only; zero-variance
/// columns record std 1 so applying the stats maps them to zero.
pub fn zscore_fit(matrix: &FeatureMatrix, train_rows: &[usize]) -> Result<ColumnStats, MatrixError> {
    if train_rows.len() < 2 {
        return Err(MatrixError::TooFewTrainRows {
            got: train_rows.len(),
        });
    }
    for &r in train_rows {
        if r >= matrix.n_subjects() {
            return Err(MatrixError::TrainRowOutOfRange {
                index: r,
                rows: matrix.n_subjects(),
            });
        }
    }
    let c = matrix.n_clusters;
    let n = train_rows.len() as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for &r in train_rows {
        for (j, v) in matrix.row(r).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for &r in train_rows {
        for (j, v) in matrix.row(r).iter().enumerate() {
            let d = v - mean[j];
            std[j] += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    Ok(ColumnStats { mean, std })
}

/// (x − mean)/std per column, over every row.
pub fn zscore_apply(
    matrix: &FeatureMatrix,
    stats: &ColumnStats,
) -> Result<FeatureMatrix, MatrixError> {
    if stats.mean.len() != matrix.n_clusters || stats.std.len() != matrix.n_clusters {
        return Err(MatrixError::StatsShapeMismatch {
            got: stats.mean.len(),
            expected: matrix.n_clusters,
        });
    }
    let mut out = matrix.clone();
    for s in 0..matrix.n_subjects() {
        for j in 0..matrix.n_clusters {
            out.values[s * matrix.n_clusters + j] =
                (matrix.get(s, j) - stats.mean[j]) / stats.std[j];
        }
    }
    out.norm = Some(stats.clone());
    Ok(out)
}

/// Population mean/std of `values` over `rows`, std-0 guard as in
/// [`zscore_fit`]. Used for target standardization.
pub fn scalar_stats(values: &[f64], rows: &[usize]) -> Result<(f64, f64), MatrixError> {
    if rows.len() < 2 {
        return Err(MatrixError::TooFewTrainRows { got: rows.len() });
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&r| values[r]).sum::<f64>() / n;
    let var = rows.iter().map(|&r| (values[r] - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok((mean, if std == 0.0 { 1.0 } else { std }))
}

// ---------------------------------------------------------------------------
// CSV and fold files
// ---------------------------------------------------------------------------

/// Render the wide CSV for one feature kind.
pub fn write_wide_csv(
    subject_ids: &[String],
    n_clusters: usize,
    values: &[f64],
) -> String {
    let mut out = String::from("subject_id");
    for c in 1..=n_clusters {
        let _ = write!(out, ",c{c:04}");
    }
    out.push('\n');
    for (s, id) in subject_ids.iter().enumerate() {
        out.push_str(id);
        for j in 0..n_clusters {
            let _ = write!(out, ",{}", values[s * n_clusters + j]);
        }
        out.push('\n');
    }
    out
}

/// Parse a wide CSV back into a target-less matrix of `kind`.
pub fn read_wide_csv(path: &Path, kind: FeatureKind) -> Result<FeatureMatrix, MatrixError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| MatrixError::Csv {
        path: display.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let n_clusters = header.split(',').count().saturating_sub(1);
    let mut subject_ids = Vec::new();
    let mut values = Vec::new();
    for (li, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default();
        let row: Result<Vec<f64>, _> = fields.map(|f| f.parse::<f64>()).collect();
        let row = row.map_err(|e| MatrixError::Csv {
            path: display.clone(),
            line: li + 1,
            msg: format!("bad value: {e}"),
        })?;
        if row.len() != n_clusters {
            return Err(MatrixError::Csv {
                path: display.clone(),
                line: li + 1,
                msg: format!("{} values, expected {}", row.len(), n_clusters),
            });
        }
        subject_ids.push(id.to_string());
        values.extend(row);
    }
    Ok(FeatureMatrix {
        kind,
        subject_ids,
        n_clusters,
        values,
        target: Vec::new(),
        norm: None,
    })
}

/// Render scores.csv: sorted assessment columns, one row per subject. Every
/// subject must carry every assessment that any subject carries.
pub fn write_scores_csv(features: &[SubjectFeatures]) -> Result<String, MatrixError> {
    let mut names: Vec<&str> = features
        .iter()
        .flat_map(|f| f.scores.keys().map(|s| s.as_str()))
        .collect();
    names.sort_unstable();
    names.dedup();
    let mut out = String::from("subject_id");
    for n in &names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    for f in features {
        out.push_str(&f.subject_id);
        for n in &names {
            let v = f.scores.get(*n).ok_or_else(|| MatrixError::MissingAssessment {
                subject: f.subject_id.clone(),
                name: n.to_string(),
            })?;
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parse scores.csv into subject_id → (assessment → score).
pub fn read_scores_csv(
    path: &Path,
) -> Result<BTreeMap<String, BTreeMap<String, f64>>, MatrixError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| MatrixError::Csv {
        path: display.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let names: Vec<&str> = header.split(',').skip(1).collect();
    let mut out = BTreeMap::new();
    for (li, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() + 1 {
            return Err(MatrixError::Csv {
                path: display.clone(),
                line: li + 1,
                msg: format!("{} fields, expected {}", fields.len(), names.len() + 1),
            });
        }
        let mut scores = BTreeMap::new();
        for (n, v) in names.iter().zip(&fields[1..]) {
            let v: f64 = v.parse().map_err(|e| MatrixError::Csv {
                path: display.clone(),
                line: li + 1,
                msg: format!("bad score: {e}"),
            })?;
            scores.insert(n.to_string(), v);
        }
        out.insert(fields[0].to_string(), scores);
    }
    Ok(out)
}

/// Long-format CSV: one row per (subject, cluster) with all 15 features.
pub fn write_long_csv(features: &[SubjectFeatures]) -> String {
    let mut out = String::from("subject_id,cluster_id");
    for k in FeatureKind::ALL {
        let _ = write!(out, ",{}", k.name());
    }
    out.push('\n');
    for f in features {
        for (ci, row) in f.rows.iter().enumerate() {
            let _ = write!(out, "{},{}", f.subject_id, ci + 1);
            for v in row.values {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Line-separated subject ids.
pub fn write_fold_file(subject_ids: &[String]) -> String {
    let mut out = String::new();
    for id in subject_ids {
        out.push_str(id);
        out.push('\n');
    }
    out
}

pub fn read_fold_file(path: &Path) -> Result<Vec<String>, MatrixError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}
