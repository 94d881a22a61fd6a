//! Command-line pipeline around the `fibershape` library.
//!
//! Subcommands:
//! - `synth`: generate a synthetic cohort with descriptor-driven scores.
//! - `features`: extract per-cluster descriptor matrices from subject dirs.
//! - `train`: fit one model on a single train/validation split and save a
//!   checkpoint.
//! - `cv`: 3-fold cross-validation; prints per-fold and mean±std Pearson r.
//! - `search`: seeded random hyperparameter search scored by cv mean r.
//! - `select-helper`: rank all 12 shape features as self-attention baselines.
//! - `gradcheck`: finite-difference check of every differentiable op.
//!
//! Every command is deterministic given `--seed` under `--threads 1` (the
//! default); console output is line-oriented and stable. Exit codes: 0
//! success, 2 usage error, 3 data error, 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use fibershape::bundle;
use fibershape::gradcheck;
use fibershape::matrix::{self, FeatureKind, FeatureMatrix, MatrixError, SubjectFeatures};
use fibershape::model::{FusionMode, ModelConfig, ModelError};
use fibershape::par;
use fibershape::shape::ShapeConfig;
use fibershape::synth::{self, GeometryFamily, SynthError, SynthSpec, TargetRule};
use fibershape::train::{
    self, EpochRecord, HyperRanges, Hyperparams, TrainError, TrainSettings,
};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
enum CliError {
    /// Bad flags or flag combinations (exit 2).
    Usage(String),
    /// Unreadable, missing, or malformed inputs (exit 3).
    Data(String),
    /// The numerics failed: non-finite losses, degenerate correlations,
    /// gradient-check failures (exit 4).
    Numeric(String),
}

type CliResult<T> = Result<T, CliError>;

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<bundle::BundleError> for CliError {
    fn from(e: bundle::BundleError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MatrixError> for CliError {
    fn from(e: MatrixError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec { .. }
            | SynthError::NonShapeWeight { .. }
            | SynthError::DuplicateTarget { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ClusterCount { .. }
            | ModelError::TokenDim { .. }
            | ModelError::Layers { .. }
            | ModelError::Heads { .. }
            | ModelError::Dropout { .. }
            | ModelError::BadFusionMode { .. }
            | ModelError::MissingHelper
            | ModelError::UnexpectedHelper => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. }
            | TrainError::NonFiniteValLoss { .. }
            | TrainError::ConstantVector { .. }
            | TrainError::NoSuccessfulTrial
            | TrainError::NoSuccessfulHelper
            | TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Command-line grammar
// ---------------------------------------------------------------------------

/// Fiber-cluster shape descriptors and transformer score prediction.
#[derive(Parser)]
#[command(name = "fibershape", version, about)]
struct Cli {
    /// Worker threads (0 = one per core). The default of 1 guarantees
    /// bit-for-bit deterministic output.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known descriptor-driven scores.
    Synth(SynthArgs),
    /// Extract per-cluster feature matrices from subject directories.
    Features(FeaturesArgs),
    /// Train one model on a single split and save a checkpoint.
    Train(TrainArgs),
    /// 3-fold cross-validation of one feature (optionally with a helper).
    Cv(CvArgs),
    /// Random hyperparameter search scored by cross-validation mean r.
    Search(SearchArgs),
    /// Score all 12 shape features as baselines and pick the best helper.
    SelectHelper(SelectHelperArgs),
    /// Finite-difference gradient check of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output root; one directory per subject is created inside.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    subjects: usize,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    /// Nominal streamlines per cluster (actual counts vary by ±2).
    #[arg(long, default_value_t = 32)]
    streamlines: usize,
    /// Geometry family: rods, arcs, or helices.
    #[arg(long, default_value = "rods")]
    family: String,
    /// Target rule "NAME:feat=w[,feat=w...][:sigma=S]"; repeatable.
    /// Defaults to "SYNTH:volume=1:sigma=0".
    #[arg(long = "target")]
    targets: Vec<String>,
    /// Voxel spacing of the synthetic grid.
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    /// Also emit synthetic FA and MD maps per cluster.
    #[arg(long)]
    with_maps: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Root holding one directory per subject.
    #[arg(long)]
    input: PathBuf,
    /// Directory that receives the wide CSV matrices and scores.csv.
    #[arg(long)]
    out: PathBuf,
    /// Voxel spacing used by the volumetric descriptors.
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    /// Clusters per subject; 0 autodetects from the cluster file names.
    #[arg(long, default_value_t = 0)]
    clusters: u32,
}

/// Data-selection flags shared by the model commands.
#[derive(Args)]
struct DataArgs {
    /// Directory holding the wide feature matrices and scores.csv.
    #[arg(long)]
    input: PathBuf,
    /// Primary feature matrix to model.
    #[arg(long, default_value = "volume")]
    feature: String,
    /// Assessment column of scores.csv to predict.
    #[arg(long, default_value = "SYNTH")]
    assessment: String,
    /// Attention wiring: "self" (baseline) or "cross" (two-stream fusion).
    #[arg(long, default_value = "self")]
    fusion: String,
    /// Helper feature for cross fusion.
    #[arg(long)]
    helper: Option<String>,
    /// Mean-pool readout instead of the CLS token.
    #[arg(long)]
    mean_pool: bool,
    /// Let the helper sequence self-attend through the layers.
    #[arg(long)]
    helper_evolves: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    /// Token width; must be a multiple of 8 in [64, 512].
    #[arg(long, default_value_t = 64)]
    token_dim: usize,
    /// Encoder layers in [1, 4].
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout_attn: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout_ffn: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout_residual: f64,
}

impl HyperArgs {
    fn to_hyperparams(&self) -> Hyperparams {
        Hyperparams {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            token_dim: self.token_dim,
            n_layers: self.layers,
            dropout_attn: self.dropout_attn,
            dropout_ffn: self.dropout_ffn,
            dropout_residual: self.dropout_residual,
        }
    }
}

#[derive(Args)]
struct SettingsArgs {
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 50)]
    patience: usize,
}

impl SettingsArgs {
    fn to_settings(&self) -> CliResult<TrainSettings> {
        if self.batch_size == 0 {
            return Err(CliError::Usage("--batch-size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(CliError::Usage("--epochs must be at least 1".into()));
        }
        Ok(TrainSettings {
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    settings: SettingsArgs,
    /// Directory that receives model.ckpt, model.cfg, and train_report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    settings: SettingsArgs,
    /// Write the full report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    settings: SettingsArgs,
    /// Sampled configurations to score.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Write the winning trial's report JSON (with the trial log) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectHelperArgs {
    /// Directory holding the 12 shape matrices and scores.csv.
    #[arg(long)]
    input: PathBuf,
    /// Assessment column of scores.csv to predict.
    #[arg(long, default_value = "SYNTH")]
    assessment: String,
    /// Mean-pool readout instead of the CLS token.
    #[arg(long)]
    mean_pool: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    settings: SettingsArgs,
    /// Write the selection report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Corrupt one gradient on purpose to prove the harness catches it.
    #[arg(long, hide = true)]
    corrupt: bool,
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn parse_kind(name: &str) -> CliResult<FeatureKind> {
    name.parse()
        .map_err(|e: MatrixError| CliError::Usage(e.to_string()))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

/// Read one wide matrix and fill its target column from scores.csv.
fn load_matrix(dir: &Path, kind: FeatureKind, assessment: &str) -> CliResult<FeatureMatrix> {
    let path = dir.join(format!("{}.csv", kind.name()));
    let mut m = matrix::read_wide_csv(&path, kind)?;
    let scores = matrix::read_scores_csv(&dir.join("scores.csv"))?;
    let mut target = Vec::with_capacity(m.subject_ids.len());
    for id in &m.subject_ids {
        let v = scores
            .get(id)
            .and_then(|by| by.get(assessment))
            .copied()
            .ok_or_else(|| {
                CliError::Data(format!("subject {id} has no {assessment:?} score"))
            })?;
        target.push(v);
    }
    m.target = target;
    Ok(m)
}

/// Resolve `--fusion`/`--helper` into a mode and an optional helper kind.
fn resolve_fusion(data: &DataArgs) -> CliResult<(FusionMode, Option<FeatureKind>)> {
    let fusion: FusionMode = data
        .fusion
        .parse()
        .map_err(|e: ModelError| CliError::Usage(e.to_string()))?;
    match (fusion, &data.helper) {
        (FusionMode::CrossFusion, None) => Err(CliError::Usage(
            "--fusion cross requires --helper <feature>".into(),
        )),
        (FusionMode::SelfBaseline, Some(_)) => Err(CliError::Usage(
            "--helper only applies with --fusion cross".into(),
        )),
        (FusionMode::CrossFusion, Some(name)) => Ok((fusion, Some(parse_kind(name)?))),
        (FusionMode::SelfBaseline, None) => Ok((fusion, None)),
    }
}

fn build_config(fusion: FusionMode, mean_pool: bool, helper_evolves: bool) -> ModelConfig {
    ModelConfig {
        fusion,
        mean_pool_readout: mean_pool,
        helper_evolves,
        ..ModelConfig::default()
    }
}

/// Load the primary matrix and, for cross fusion, the helper matrix.
fn load_model_inputs(
    data: &DataArgs,
) -> CliResult<(FeatureMatrix, Option<FeatureMatrix>, FusionMode)> {
    let (fusion, helper_kind) = resolve_fusion(data)?;
    let feature = parse_kind(&data.feature)?;
    let primary = load_matrix(&data.input, feature, &data.assessment)?;
    let helper = match helper_kind {
        Some(k) => Some(load_matrix(&data.input, k, &data.assessment)?),
        None => None,
    };
    Ok((primary, helper, fusion))
}

fn hyper_line(h: &Hyperparams) -> String {
    format!(
        "lr {:.3e}, wd {:.3e}, d {}, layers {}, dropouts {:.3}/{:.3}/{:.3}",
        h.learning_rate,
        h.weight_decay,
        h.token_dim,
        h.n_layers,
        h.dropout_attn,
        h.dropout_ffn,
        h.dropout_residual,
    )
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn parse_target_rule(s: &str) -> CliResult<TargetRule> {
    let usage = || {
        CliError::Usage(format!(
            "bad --target {s:?}: expected NAME:feat=w[,feat=w...][:sigma=S]"
        ))
    };
    let mut parts = s.split(':');
    let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(usage)?;
    let weight_part = parts.next().ok_or_else(usage)?;
    let mut weights = Vec::new();
    for item in weight_part.split(',') {
        let (kind, w) = item.split_once('=').ok_or_else(usage)?;
        let kind = parse_kind(kind.trim())?;
        let w: f64 = w.trim().parse().map_err(|_| usage())?;
        weights.push((kind, w));
    }
    let mut noise_sigma = 0.0;
    for extra in parts {
        let v = extra.strip_prefix("sigma=").ok_or_else(usage)?;
        noise_sigma = v.parse().map_err(|_| usage())?;
    }
    Ok(TargetRule {
        name: name.to_string(),
        weights,
        noise_sigma,
    })
}

fn run_synth(args: &SynthArgs) -> CliResult<()> {
    let family: GeometryFamily = args
        .family
        .parse()
        .map_err(|e: SynthError| CliError::Usage(e.to_string()))?;
    let targets = if args.targets.is_empty() {
        vec![TargetRule {
            name: "SYNTH".into(),
            weights: vec![(FeatureKind::Volume, 1.0)],
            noise_sigma: 0.0,
        }]
    } else {
        args.targets
            .iter()
            .map(|s| parse_target_rule(s))
            .collect::<CliResult<Vec<_>>>()?
    };
    let spec = SynthSpec {
        subjects: args.subjects,
        clusters: args.clusters,
        streamlines: args.streamlines,
        family,
        targets,
        seed: args.seed,
        spacing: args.spacing,
        with_scalar_maps: args.with_maps,
    };
    synth::generate_into(&spec, &args.out)?;
    println!(
        "wrote {} subjects x {} clusters ({}) to {}",
        spec.subjects,
        spec.clusters,
        spec.family,
        args.out.display()
    );
    for rule in &spec.targets {
        println!(
            "  target {}: {} term(s), sigma={}",
            rule.name,
            rule.weights.len(),
            rule.noise_sigma
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// features
// ---------------------------------------------------------------------------

fn list_subject_dirs(root: &Path) -> CliResult<Vec<PathBuf>> {
    let rd = fs::read_dir(root)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Highest cluster index referenced by any cluster_NNNN.slb file.
fn detect_cluster_count(dirs: &[PathBuf]) -> CliResult<u32> {
    let mut max_id = 0u32;
    for dir in dirs {
        let rd = fs::read_dir(dir)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?;
        for entry in rd.filter_map(Result::ok) {
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(id) = name
                .strip_prefix("cluster_")
                .and_then(|r| r.strip_suffix(".slb"))
                .and_then(|r| r.parse::<u32>().ok())
            {
                max_id = max_id.max(id);
            }
        }
    }
    if max_id == 0 {
        return Err(CliError::Data(
            "no cluster_NNNN.slb files found; pass --clusters explicitly".into(),
        ));
    }
    Ok(max_id)
}

fn subject_dir_id(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn run_features(args: &FeaturesArgs) -> CliResult<()> {
    let dirs = list_subject_dirs(&args.input)?;
    if dirs.is_empty() {
        return Err(CliError::Data(format!(
            "no subject directories under {}",
            args.input.display()
        )));
    }
    let clusters = if args.clusters == 0 {
        detect_cluster_count(&dirs)?
    } else {
        args.clusters
    };
    let config = ShapeConfig {
        spacing: args.spacing,
        ..ShapeConfig::default()
    };

    // Failures are reported per subject and the run continues with the rest.
    let mut loaded = Vec::new();
    let mut failed = 0usize;
    for dir in &dirs {
        match bundle::load_subject(dir, clusters, &[]) {
            Ok(subject) => loaded.push(subject),
            Err(e) => {
                eprintln!("subject {}: {e}", subject_dir_id(dir));
                failed += 1;
            }
        }
    }
    if loaded.is_empty() {
        return Err(CliError::Data(format!(
            "all {} subjects failed to load",
            dirs.len()
        )));
    }

    let features: Vec<SubjectFeatures> = loaded
        .iter()
        .map(|s| matrix::extract_features(s, &config))
        .collect();
    let ids: Vec<String> = features.iter().map(|f| f.subject_id.clone()).collect();
    let n_clusters = clusters as usize;

    let any_fa = loaded.iter().any(|s| s.fa.iter().any(Option::is_some));
    let any_md = loaded.iter().any(|s| s.md.iter().any(Option::is_some));

    create_dir(&args.out)?;
    let mut written = 0usize;
    for kind in FeatureKind::ALL {
        if (kind == FeatureKind::Fa && !any_fa) || (kind == FeatureKind::Md && !any_md) {
            continue;
        }
        let values: Vec<f64> = features
            .iter()
            .flat_map(|f| f.rows.iter().map(|row| row.get(kind)))
            .collect();
        let csv = matrix::write_wide_csv(&ids, n_clusters, &values);
        write_file(&args.out.join(format!("{}.csv", kind.name())), &csv)?;
        written += 1;
    }
    write_file(&args.out.join("scores.csv"), &matrix::write_scores_csv(&features)?)?;

    println!(
        "wrote {written} feature matrices for {} subjects ({} clusters each) to {}",
        loaded.len(),
        n_clusters,
        args.out.display()
    );
    if failed > 0 {
        return Err(CliError::Data(format!(
            "{failed} of {} subjects failed to load",
            dirs.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Everything needed to audit a single-split training run.
#[derive(Serialize)]
struct TrainCmdReport {
    feature: String,
    helper: Option<String>,
    fusion: String,
    assessment: String,
    seed: u64,
    hyperparams: Hyperparams,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    train_subjects: Vec<String>,
    val_subjects: Vec<String>,
    target_mean: f64,
    target_std: f64,
    best_epoch: usize,
    best_val_loss: f64,
    history: Vec<EpochRecord>,
}

fn run_train(args: &TrainArgs) -> CliResult<()> {
    let settings = args.settings.to_settings()?;
    let hyper = args.hyper.to_hyperparams();
    let (primary, helper, fusion) = load_model_inputs(&args.data)?;
    let n = primary.n_subjects();
    if n < 3 {
        return Err(CliError::Data(format!(
            "need at least 3 subjects to split, got {n}"
        )));
    }

    // Seeded split: ~25% of subjects (at least 1) become the validation set.
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(args.data.seed));
    let n_val = (n / 4).max(1);
    let (val_rows, train_rows) = rows.split_at(n_val);

    // Normalization and target standardization fit on the training rows only.
    let p_stats = matrix::zscore_fit(&primary, train_rows)?;
    let mut p_norm = matrix::zscore_apply(&primary, &p_stats)?;
    let (t_mean, t_std) = matrix::scalar_stats(&primary.target, train_rows)?;
    for t in &mut p_norm.target {
        *t = (*t - t_mean) / t_std;
    }
    let h_norm = match &helper {
        Some(h) => {
            let stats = matrix::zscore_fit(h, train_rows)?;
            Some(matrix::zscore_apply(h, &stats)?)
        }
        None => None,
    };

    let config = build_config(fusion, args.data.mean_pool, args.data.helper_evolves);
    let outcome = train::train(
        &train::FoldData {
            primary: &p_norm,
            helper: h_norm.as_ref(),
            train_rows,
            val_rows,
        },
        &config,
        &hyper,
        &settings,
        args.data.seed,
    )?;

    create_dir(&args.out)?;
    let stem = args.out.join("model");
    outcome.params.save(&stem)?;
    let report = TrainCmdReport {
        feature: primary.kind.name().to_string(),
        helper: helper.as_ref().map(|h| h.kind.name().to_string()),
        fusion: fusion.to_string(),
        assessment: args.data.assessment.clone(),
        seed: args.data.seed,
        hyperparams: hyper,
        batch_size: settings.batch_size,
        max_epochs: settings.max_epochs,
        patience: settings.patience,
        train_subjects: train_rows
            .iter()
            .map(|&r| primary.subject_ids[r].clone())
            .collect(),
        val_subjects: val_rows
            .iter()
            .map(|&r| primary.subject_ids[r].clone())
            .collect(),
        target_mean: t_mean,
        target_std: t_std,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        history: outcome.history,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&args.out.join("train_report.json"), &(json + "\n"))?;

    println!(
        "trained {} ({} fusion) on {} subjects, validated on {}",
        report.feature,
        report.fusion,
        report.train_subjects.len(),
        report.val_subjects.len()
    );
    println!(
        "best epoch {}: val mse {:.6e}",
        report.best_epoch, report.best_val_loss
    );
    println!("checkpoint: {}", stem.with_extension("ckpt").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// cv / search / select-helper
// ---------------------------------------------------------------------------

fn run_cv(args: &CvArgs) -> CliResult<()> {
    let settings = args.settings.to_settings()?;
    let hyper = args.hyper.to_hyperparams();
    let (primary, helper, fusion) = load_model_inputs(&args.data)?;
    let config = build_config(fusion, args.data.mean_pool, args.data.helper_evolves);
    let report = train::cross_validate(
        &primary,
        helper.as_ref(),
        &config,
        &hyper,
        &settings,
        args.data.seed,
    )?;

    for fold in &report.folds {
        println!(
            "fold {}: r = {:.6} (best epoch {})",
            fold.fold, fold.r, fold.best_epoch
        );
    }
    println!(
        "cv {} ({} fusion): r = {}",
        report.feature, report.fusion, report.summary
    );
    if let Some(out) = &args.out {
        write_file(out, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

fn run_search(args: &SearchArgs) -> CliResult<()> {
    let settings = args.settings.to_settings()?;
    if args.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let (primary, helper, fusion) = load_model_inputs(&args.data)?;
    let config = build_config(fusion, args.data.mean_pool, args.data.helper_evolves);
    let ranges = HyperRanges {
        trials: args.trials,
        ..HyperRanges::default()
    };
    let report = train::hyperparam_search(
        &primary,
        helper.as_ref(),
        &config,
        &ranges,
        &settings,
        args.data.seed,
    )?;

    for trial in &report.trials {
        match (&trial.summary, &trial.error) {
            (Some(summary), _) => println!(
                "trial {:02}: r = {summary}  ({})",
                trial.trial,
                hyper_line(&trial.hyperparams)
            ),
            (None, Some(err)) => println!("trial {:02}: failed: {err}", trial.trial),
            (None, None) => unreachable!("trial has neither summary nor error"),
        }
    }
    println!("best hyperparams: {}", hyper_line(&report.hyperparams));
    println!(
        "search {} ({} fusion): best r = {}",
        report.feature, report.fusion, report.summary
    );
    if let Some(out) = &args.out {
        write_file(out, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

fn run_select_helper(args: &SelectHelperArgs) -> CliResult<()> {
    let settings = args.settings.to_settings()?;
    let hyper = args.hyper.to_hyperparams();
    let matrices = FeatureKind::SHAPE
        .iter()
        .map(|&k| load_matrix(&args.input, k, &args.assessment))
        .collect::<CliResult<Vec<_>>>()?;
    let config = build_config(FusionMode::SelfBaseline, args.mean_pool, false);
    let report =
        train::select_helper_feature(&matrices, &config, &hyper, &settings, args.seed)?;

    for score in &report.scores {
        let shown = match (&score.summary, &score.error) {
            (Some(summary), _) => format!("r = {summary}"),
            (None, Some(err)) => format!("failed: {err}"),
            (None, None) => unreachable!("score has neither summary nor error"),
        };
        println!("{:<24} {shown}", score.feature);
    }
    println!("selected helper: {}", report.selected);
    if let Some(out) = &args.out {
        write_file(out, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn run_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    let report = gradcheck::run_gradcheck(args.corrupt);
    println!("{:<28} {:>12} {:>8}  result", "op", "max_rel_err", "params");
    let mut passed = 0usize;
    for entry in &report.entries {
        println!(
            "{:<28} {:>12.3e} {:>8}  {}",
            entry.name,
            entry.max_rel_err,
            entry.parameter_count,
            if entry.passed { "PASS" } else { "FAIL" }
        );
        passed += usize::from(entry.passed);
    }
    println!(
        "tolerance {:.1e}: {passed}/{} passed",
        report.tolerance,
        report.entries.len()
    );
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Numeric(
            "gradient check failed; see the table above".into(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    // 0 keeps the backend default (one worker per core); any other value
    // installs a pool of exactly that size.
    if cli.threads != 0 && !par::set_threads(cli.threads) && cli.threads > 1 {
        eprintln!("warning: parallel backend unavailable; running single-threaded");
    }

    let result = match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Features(args) => run_features(args),
        Command::Train(args) => run_train(args),
        Command::Cv(args) => run_cv(args),
        Command::Search(args) => run_search(args),
        Command::SelectHelper(args) => run_select_helper(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
