//! Training loop, 3-fold cross-validation, random hyperparameter search, and
//! helper-feature selection.
//!
//! All randomness is derived from a caller-supplied master seed through
//! tagged hash chains, never from execution order, so fold and trial runs are
//! reproducible bit-for-bit whether they execute sequentially or in parallel.
//! Within one cross-validation the fold splits, model-init seeds, and
//! training seeds depend only on (master seed, fold index) — two features
//! scored under the same master seed see identical folds and identical
//! initializations, which makes helper selection a pure comparison of the
//! data.
//!
//! Reports serialize to JSON with a fixed field order and no timestamps, so
//! identical seeds yield byte-identical report files.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{self, FeatureKind, FeatureMatrix, MatrixError};
use crate::model::{
    bind, forward, predict, splitmix64, FusionMode, ModelConfig, ModelError, ModelParams,
};
use crate::par;
use crate::tensor::adam::{Adam, AdamConfig};
use crate::tensor::{Graph, Tensor, TensorError};

/// Number of cross-validation folds.
pub const FOLD_COUNT: usize = 3;

// Domain-separation tags for seed derivation.
const TAG_FOLD_SHUFFLE: u64 = 1;
const TAG_INNER_SPLIT: u64 = 2;
const TAG_MODEL_INIT: u64 = 3;
const TAG_FOLD_TRAIN: u64 = 4;
const TAG_EPOCH_SHUFFLE: u64 = 5;
const TAG_DROPOUT: u64 = 6;
const TAG_TRIAL: u64 = 7;

/// Independent stream for (master, tag, index); every consumer of randomness
/// draws from its own derived seed.
fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(tag)) ^ splitmix64(index ^ 0xd1b5_4a32_d192_ed03))
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("score vectors have different lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least 2 paired scores, got {got}")]
    TooShort { got: usize },
    #[error("{side} scores are constant; correlation is undefined")]
    ConstantVector { side: &'static str },
    #[error("cross-validation needs at least 6 subjects, got {got}")]
    TooFewSubjects { got: usize },
    #[error("training fold is empty")]
    EmptyTrainFold,
    #[error("validation fold is empty")]
    EmptyValFold,
    #[error("subject row {index} out of range for {rows} subjects")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("helper matrix has {got} subjects, primary has {expected}")]
    SubjectMismatch { got: usize, expected: usize },
    #[error("helper matrix has {got} clusters, primary has {expected}")]
    ClusterMismatch { got: usize, expected: usize },
    #[error("helper subject order differs from primary at row {index}")]
    SubjectOrderMismatch { index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite validation loss at epoch {epoch}")]
    NonFiniteValLoss { epoch: usize },
    #[error("helper selection expects the 12 shape matrices in listing order; slot {slot} holds {got}")]
    BadHelperSet { slot: usize, got: String },
    #[error("every hyperparameter trial failed")]
    NoSuccessfulTrial,
    #[error("every helper-feature run failed")]
    NoSuccessfulHelper,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

// ---------------------------------------------------------------------------
// Pearson correlation
// ---------------------------------------------------------------------------

/// Pearson correlation coefficient: Σ(dx·dy)/√(Σdx²·Σdy²) with d the
/// deviation from the mean. Errors when either vector is constant.
pub fn pearson_r(pred: &[f64], actual: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != actual.len() {
        return Err(TrainError::LengthMismatch {
            a: pred.len(),
            b: actual.len(),
        });
    }
    if pred.len() < 2 {
        return Err(TrainError::TooShort { got: pred.len() });
    }
    let n = pred.len() as f64;
    let mx = pred.iter().sum::<f64>() / n;
    let my = actual.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in pred.iter().zip(actual) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(TrainError::ConstantVector { side: "predicted" });
    }
    if syy == 0.0 {
        return Err(TrainError::ConstantVector { side: "actual" });
    }
    Ok(sxy / (sxx * syy).sqrt())
}

// ---------------------------------------------------------------------------
// Hyperparameters and settings
// ---------------------------------------------------------------------------

/// Optimizer and architecture knobs explored by the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub token_dim: usize,
    pub n_layers: usize,
    pub dropout_attn: f64,
    pub dropout_ffn: f64,
    pub dropout_residual: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            token_dim: 64,
            n_layers: 1,
            dropout_attn: 0.0,
            dropout_ffn: 0.0,
            dropout_residual: 0.0,
        }
    }
}

impl Hyperparams {
    /// Fold the architecture knobs into a model config, keeping the task
    /// fields (cluster count, fusion, readout) from `base`.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            token_dim: self.token_dim,
            n_layers: self.n_layers,
            dropout_attn: self.dropout_attn,
            dropout_ffn: self.dropout_ffn,
            dropout_residual: self.dropout_residual,
            ..base.clone()
        }
    }
}

/// Epoch/batch schedule for the training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 8,
            max_epochs: 1000,
            patience: 50,
        }
    }
}

/// Search space for [`hyperparam_search`]; defaults give the published
/// ranges and the 20-trial budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperRanges {
    pub learning_rate: (f64, f64),
    pub weight_decay: (f64, f64),
    pub token_dim: (usize, usize),
    pub n_layers: (usize, usize),
    pub dropout_attn: (f64, f64),
    pub dropout_ffn: (f64, f64),
    pub dropout_residual: (f64, f64),
    pub trials: usize,
}

impl Default for HyperRanges {
    fn default() -> Self {
        HyperRanges {
            learning_rate: (1e-5, 1e-3),
            weight_decay: (1e-6, 1e-3),
            token_dim: (64, 512),
            n_layers: (1, 4),
            dropout_attn: (0.0, 0.5),
            dropout_ffn: (0.0, 0.5),
            dropout_residual: (0.0, 0.2),
            trials: 20,
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    let u: f64 = rng.random();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.random_range(lo..=hi)
}

/// Draw one configuration. Field order is fixed (lr, weight decay, token
/// dim, layers, dropouts) so a seeded generator reproduces the trial list.
pub fn sample_hyperparams(ranges: &HyperRanges, rng: &mut ChaCha8Rng) -> Hyperparams {
    let learning_rate = log_uniform(rng, ranges.learning_rate.0, ranges.learning_rate.1);
    let weight_decay = log_uniform(rng, ranges.weight_decay.0, ranges.weight_decay.1);
    let (d_lo, d_hi) = ranges.token_dim;
    let raw: usize = rng.random_range(d_lo..=d_hi);
    // Nearest multiple of 8, clamped back into the (8-aligned) range so it
    // divides across the 8 heads.
    let token_dim = ((raw + 4) / 8 * 8).clamp(d_lo.div_ceil(8) * 8, d_hi / 8 * 8);
    let n_layers = rng.random_range(ranges.n_layers.0..=ranges.n_layers.1);
    let dropout_attn = uniform(rng, ranges.dropout_attn.0, ranges.dropout_attn.1);
    let dropout_ffn = uniform(rng, ranges.dropout_ffn.0, ranges.dropout_ffn.1);
    let dropout_residual = uniform(rng, ranges.dropout_residual.0, ranges.dropout_residual.1);
    Hyperparams {
        learning_rate,
        weight_decay,
        token_dim,
        n_layers,
        dropout_attn,
        dropout_ffn,
        dropout_residual,
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One fold's worth of data: normalized feature matrices plus row indices
/// for the training and validation subjects. Callers provide disjoint index
/// sets for honest validation; the overfit harness passes the same set
/// twice on purpose.
#[derive(Debug, Clone, Copy)]
pub struct FoldData<'a> {
    pub primary: &'a FeatureMatrix,
    pub helper: Option<&'a FeatureMatrix>,
    pub train_rows: &'a [usize],
    pub val_rows: &'a [usize],
}

/// Per-epoch losses; `train_loss` is the batch-size-weighted mean of the
/// minibatch losses seen during the epoch, `val_loss` an eval-mode pass over
/// the validation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

fn gather_rows(m: &FeatureMatrix, rows: &[usize]) -> Vec<Vec<f64>> {
    rows.iter().map(|&s| m.row(s).to_vec()).collect()
}

fn check_rows(m: &FeatureMatrix, rows: &[usize]) -> Result<(), TrainError> {
    for &r in rows {
        if r >= m.n_subjects() {
            return Err(TrainError::RowOutOfRange {
                index: r,
                rows: m.n_subjects(),
            });
        }
    }
    Ok(())
}

fn check_helper_alignment(
    primary: &FeatureMatrix,
    helper: Option<&FeatureMatrix>,
) -> Result<(), TrainError> {
    let Some(h) = helper else { return Ok(()) };
    if h.n_subjects() != primary.n_subjects() {
        return Err(TrainError::SubjectMismatch {
            got: h.n_subjects(),
            expected: primary.n_subjects(),
        });
    }
    if h.n_clusters != primary.n_clusters {
        return Err(TrainError::ClusterMismatch {
            got: h.n_clusters,
            expected: primary.n_clusters,
        });
    }
    for (i, (a, b)) in h.subject_ids.iter().zip(&primary.subject_ids).enumerate() {
        if a != b {
            return Err(TrainError::SubjectOrderMismatch { index: i });
        }
    }
    Ok(())
}

/// Eval-mode mean-squared error of `params` over the given rows.
fn eval_mse(
    params: &ModelParams,
    primary: &[Vec<f64>],
    helper: Option<&[Vec<f64>]>,
    targets: &[f64],
) -> Result<f64, TrainError> {
    let preds = predict(params, primary, helper)?;
    let n = targets.len() as f64;
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Minimize MSE over shuffled minibatches with Adam, early-stopping on
/// validation loss: training ends after `max_epochs` epochs or `patience`
/// epochs without strict validation improvement, and the parameters from the
/// best validation epoch are returned together with the loss history.
pub fn train(
    data: &FoldData,
    config: &ModelConfig,
    hyper: &Hyperparams,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    assert!(settings.batch_size >= 1, "batch size must be at least 1");
    assert!(settings.max_epochs >= 1, "need at least one epoch");
    if data.train_rows.is_empty() {
        return Err(TrainError::EmptyTrainFold);
    }
    if data.val_rows.is_empty() {
        return Err(TrainError::EmptyValFold);
    }
    check_rows(data.primary, data.train_rows)?;
    check_rows(data.primary, data.val_rows)?;
    check_helper_alignment(data.primary, data.helper)?;

    let mut cfg = hyper.apply(config);
    cfg.cluster_count = data.primary.n_clusters;
    cfg.seed = derive_seed(seed, TAG_MODEL_INIT, 0);
    cfg.validate()?;

    let mut params = ModelParams::init(&cfg);
    let mut opt = Adam::new(AdamConfig {
        lr: hyper.learning_rate,
        weight_decay: hyper.weight_decay,
        ..AdamConfig::default()
    });

    let val_primary = gather_rows(data.primary, data.val_rows);
    let val_helper = data.helper.map(|h| gather_rows(h, data.val_rows));
    let val_targets: Vec<f64> = data
        .val_rows
        .iter()
        .map(|&s| data.primary.target[s])
        .collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..settings.max_epochs {
        let mut order = data.train_rows.to_vec();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EPOCH_SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(settings.batch_size).enumerate() {
            let batch_primary = gather_rows(data.primary, batch);
            let batch_helper = data.helper.map(|h| gather_rows(h, batch));
            let batch_targets: Vec<f64> =
                batch.iter().map(|&s| data.primary.target[s]).collect();

            let dropout_seed =
                derive_seed(seed, TAG_DROPOUT, ((epoch as u64) << 20) | step as u64);
            let mut g = Graph::new(true, dropout_seed);
            let bound = bind(&mut g, &params);
            let out = forward(&mut g, &bound, &cfg, &batch_primary, batch_helper.as_deref())?;
            let target = g.constant(Tensor::col(batch_targets));
            let loss = g.mse_loss(out.predictions, target);
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: step });
            }
            loss_sum += loss_value * batch.len() as f64;

            g.backward(loss)?;
            let grads: Vec<Option<&Tensor>> =
                bound.ids().iter().map(|&(_, id)| g.grad(id)).collect();
            opt.step(params.entries_mut(), &grads)?;
        }
        let train_loss = loss_sum / order.len() as f64;

        let val_loss = eval_mse(&params, &val_primary, val_helper.as_deref(), &val_targets)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteValLoss { epoch });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });

        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, params.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= settings.patience {
                break;
            }
        }
    }

    let (best_val_loss, best_epoch, best_params) =
        best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        history,
        best_epoch,
        best_val_loss,
    })
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// One line of a fold's loss history plus its held-out correlation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub r: f64,
    pub best_epoch: usize,
    pub val_subjects: Vec<String>,
    pub history: Vec<EpochRecord>,
}

/// Hyperparameter-trial summary kept in the search log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub hyperparams: Hyperparams,
    pub r_mean: Option<f64>,
    pub r_std: Option<f64>,
    pub summary: Option<String>,
    pub error: Option<String>,
}

/// Seeds actually used, for audit and exact re-runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedLog {
    pub master: u64,
    pub fold_model: Vec<u64>,
    pub fold_train: Vec<u64>,
}

/// Cross-validation (and, when produced by [`hyperparam_search`], trial-log)
/// report. Serializes to JSON with a stable field order and no timestamps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub feature: String,
    pub helper: Option<String>,
    pub fusion: String,
    pub trials: Vec<TrialRecord>,
    pub folds: Vec<FoldReport>,
    pub r_mean: f64,
    pub r_std: f64,
    pub summary: String,
    pub hyperparams: Hyperparams,
    pub seeds: SeedLog,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `mean±std` with 3 decimals, e.g. `0.418±0.077`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3}±{std:.3}")
}

/// Partition `0..n` into [`FOLD_COUNT`] seeded, near-equal folds.
fn make_folds(n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_FOLD_SHUFFLE, 0));
    order.shuffle(&mut rng);
    let base = n / FOLD_COUNT;
    let extra = n % FOLD_COUNT;
    let mut folds = Vec::with_capacity(FOLD_COUNT);
    let mut at = 0;
    for k in 0..FOLD_COUNT {
        let len = base + usize::from(k < extra);
        folds.push(order[at..at + len].to_vec());
        at += len;
    }
    let mut seen: Vec<usize> = folds.iter().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..n).collect::<Vec<_>>(), "folds must partition 0..n");
    folds
}

fn standardize_target(m: &mut FeatureMatrix, mean: f64, std: f64) {
    for t in &mut m.target {
        *t = (*t - mean) / std;
    }
}

struct FoldRun {
    report: FoldReport,
    model_seed: u64,
    train_seed: u64,
}

fn run_fold(
    fold: usize,
    held: &[usize],
    rest: &[usize],
    primary: &FeatureMatrix,
    helper: Option<&FeatureMatrix>,
    config: &ModelConfig,
    hyper: &Hyperparams,
    settings: &TrainSettings,
    seed: u64,
) -> Result<FoldRun, TrainError> {
    // Inner early-stopping split: ~25% of the training portion becomes the
    // validation set; the held-out fold is never seen before prediction.
    let mut inner = rest.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_INNER_SPLIT, fold as u64));
    inner.shuffle(&mut rng);
    let n_val = (inner.len() / 4).max(1);
    let (inner_val, inner_train) = inner.split_at(n_val);

    for &h in held {
        assert!(!rest.contains(&h), "held-out subject leaked into training");
    }
    assert!(
        inner_train.iter().all(|s| !inner_val.contains(s)),
        "inner split must be disjoint"
    );

    // Normalization and target standardization fit on the inner training
    // rows only.
    let p_stats = matrix::zscore_fit(primary, inner_train)?;
    let mut p_norm = matrix::zscore_apply(primary, &p_stats)?;
    let (t_mean, t_std) = matrix::scalar_stats(&primary.target, inner_train)?;
    standardize_target(&mut p_norm, t_mean, t_std);
    let h_norm = match helper {
        Some(h) => {
            let stats = matrix::zscore_fit(h, inner_train)?;
            Some(matrix::zscore_apply(h, &stats)?)
        }
        None => None,
    };

    let train_seed = derive_seed(seed, TAG_FOLD_TRAIN, fold as u64);
    // train() derives its init seed from the training seed, so both depend
    // only on (master seed, fold index); record the value it will use.
    let model_seed = derive_seed(train_seed, TAG_MODEL_INIT, 0);

    let outcome = train(
        &FoldData {
            primary: &p_norm,
            helper: h_norm.as_ref(),
            train_rows: inner_train,
            val_rows: inner_val,
        },
        config,
        hyper,
        settings,
        train_seed,
    )?;

    let held_primary = gather_rows(&p_norm, held);
    let held_helper = h_norm.as_ref().map(|h| gather_rows(h, held));
    let standardized = predict(&outcome.params, &held_primary, held_helper.as_deref())?;
    let preds: Vec<f64> = standardized.iter().map(|p| p * t_std + t_mean).collect();
    let actual: Vec<f64> = held.iter().map(|&s| primary.target[s]).collect();
    let r = pearson_r(&preds, &actual)?;

    Ok(FoldRun {
        report: FoldReport {
            fold,
            r,
            best_epoch: outcome.best_epoch,
            val_subjects: held
                .iter()
                .map(|&s| primary.subject_ids[s].clone())
                .collect(),
            history: outcome.history,
        },
        model_seed,
        train_seed,
    })
}

/// Shuffle subjects into 3 folds, hold each out once, and report the
/// per-fold Pearson r of the held-out predictions together with mean ± std.
pub fn cross_validate(
    primary: &FeatureMatrix,
    helper: Option<&FeatureMatrix>,
    config: &ModelConfig,
    hyper: &Hyperparams,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainReport, TrainError> {
    let n = primary.n_subjects();
    if n < 2 * FOLD_COUNT {
        return Err(TrainError::TooFewSubjects { got: n });
    }
    check_helper_alignment(primary, helper)?;
    let mut cfg = config.clone();
    cfg.cluster_count = primary.n_clusters;
    cfg.fusion = if helper.is_some() {
        FusionMode::CrossFusion
    } else {
        FusionMode::SelfBaseline
    };

    let folds = make_folds(n, seed);
    let runs: Vec<Result<FoldRun, TrainError>> = par::map_indices(FOLD_COUNT, |k| {
        let rest: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        run_fold(
            k, &folds[k], &rest, primary, helper, &cfg, hyper, settings, seed,
        )
    });

    let mut fold_reports = Vec::with_capacity(FOLD_COUNT);
    let mut fold_model = Vec::with_capacity(FOLD_COUNT);
    let mut fold_train = Vec::with_capacity(FOLD_COUNT);
    for run in runs {
        let run = run?;
        fold_reports.push(run.report);
        fold_model.push(run.model_seed);
        fold_train.push(run.train_seed);
    }

    let rs: Vec<f64> = fold_reports.iter().map(|f| f.r).collect();
    let r_mean = rs.iter().sum::<f64>() / rs.len() as f64;
    let r_std =
        (rs.iter().map(|r| (r - r_mean) * (r - r_mean)).sum::<f64>() / rs.len() as f64).sqrt();

    Ok(TrainReport {
        feature: primary.kind.name().to_string(),
        helper: helper.map(|h| h.kind.name().to_string()),
        fusion: cfg.fusion.to_string(),
        trials: Vec::new(),
        folds: fold_reports,
        r_mean,
        r_std,
        summary: format_mean_std(r_mean, r_std),
        hyperparams: hyper.clone(),
        seeds: SeedLog {
            master: seed,
            fold_model,
            fold_train,
        },
    })
}

// ---------------------------------------------------------------------------
// Hyperparameter search
// ---------------------------------------------------------------------------

/// Index of the best trial under strict-max scoring; ties go to the lower
/// trial index. `None` when no trial succeeded.
fn best_trial_index(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in scores.iter().enumerate() {
        if let Some(r) = r {
            if best.is_none_or(|(_, b)| *r > b) {
                best = Some((i, *r));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Seeded random search: score `ranges.trials` sampled configurations by
/// [`cross_validate`] mean r (same folds every trial) and return the best
/// trial's report with the full trial log attached. Failed trials are
/// recorded and skipped.
pub fn hyperparam_search(
    primary: &FeatureMatrix,
    helper: Option<&FeatureMatrix>,
    config: &ModelConfig,
    ranges: &HyperRanges,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainReport, TrainError> {
    let hypers: Vec<Hyperparams> = (0..ranges.trials)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_TRIAL, i as u64));
            sample_hyperparams(ranges, &mut rng)
        })
        .collect();

    let mut results: Vec<Option<TrainReport>> = par::map_slice(&hypers, |h| {
        cross_validate(primary, helper, config, h, settings, seed).ok()
    })
    .into_iter()
    .collect();
    // Re-run failures sequentially to capture their error text (the parallel
    // pass keeps only successes to avoid sending errors across threads).
    let trials: Vec<TrialRecord> = hypers
        .iter()
        .enumerate()
        .map(|(i, h)| match &results[i] {
            Some(rep) => TrialRecord {
                trial: i,
                hyperparams: h.clone(),
                r_mean: Some(rep.r_mean),
                r_std: Some(rep.r_std),
                summary: Some(rep.summary.clone()),
                error: None,
            },
            None => {
                let err = cross_validate(primary, helper, config, h, settings, seed)
                    .err()
                    .map(|e| e.to_string())
                    .unwrap_or_else(|| "transient failure".to_string());
                TrialRecord {
                    trial: i,
                    hyperparams: h.clone(),
                    r_mean: None,
                    r_std: None,
                    summary: None,
                    error: Some(err),
                }
            }
        })
        .collect();

    let scores: Vec<Option<f64>> = trials.iter().map(|t| t.r_mean).collect();
    let best = best_trial_index(&scores).ok_or(TrainError::NoSuccessfulTrial)?;
    let mut report = results[best].take().expect("best trial succeeded");
    report.trials = trials;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Helper-feature selection
// ---------------------------------------------------------------------------

/// One row of the helper-selection log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HelperScore {
    pub feature: String,
    pub r_mean: Option<f64>,
    pub r_std: Option<f64>,
    pub summary: Option<String>,
    pub error: Option<String>,
}

/// Helper-selection result: all 12 shape-feature baselines plus the winner.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectReport {
    pub scores: Vec<HelperScore>,
    pub selected: String,
    pub seed: u64,
}

impl SelectReport {
    pub fn selected_kind(&self) -> FeatureKind {
        self.selected.parse().expect("selected name is a feature kind")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Score every shape feature with the self-attention baseline under one
/// shared master seed (identical folds, inits, and batch schedules across
/// features) and return the kind with the highest mean r; exact ties go to
/// the lower index in the listing order.
pub fn select_helper_feature(
    shape_matrices: &[FeatureMatrix],
    config: &ModelConfig,
    hyper: &Hyperparams,
    settings: &TrainSettings,
    seed: u64,
) -> Result<SelectReport, TrainError> {
    if shape_matrices.len() != FeatureKind::SHAPE.len() {
        return Err(TrainError::BadHelperSet {
            slot: shape_matrices.len(),
            got: format!("{} matrices", shape_matrices.len()),
        });
    }
    for (slot, (m, kind)) in shape_matrices
        .iter()
        .zip(FeatureKind::SHAPE.iter())
        .enumerate()
    {
        if m.kind != *kind {
            return Err(TrainError::BadHelperSet {
                slot,
                got: m.kind.name().to_string(),
            });
        }
    }

    let mut base = config.clone();
    base.fusion = FusionMode::SelfBaseline;
    let reports: Vec<Result<TrainReport, String>> = par::map_slice(shape_matrices, |m| {
        cross_validate(m, None, &base, hyper, settings, seed).map_err(|e| e.to_string())
    });

    let scores: Vec<HelperScore> = reports
        .iter()
        .zip(FeatureKind::SHAPE.iter())
        .map(|(rep, kind)| match rep {
            Ok(r) => HelperScore {
                feature: kind.name().to_string(),
                r_mean: Some(r.r_mean),
                r_std: Some(r.r_std),
                summary: Some(r.summary.clone()),
                error: None,
            },
            Err(e) => HelperScore {
                feature: kind.name().to_string(),
                r_mean: None,
                r_std: None,
                summary: None,
                error: Some(e.clone()),
            },
        })
        .collect();

    let means: Vec<Option<f64>> = scores.iter().map(|s| s.r_mean).collect();
    let best = best_trial_index(&means).ok_or(TrainError::NoSuccessfulHelper)?;
    Ok(SelectReport {
        selected: FeatureKind::SHAPE[best].name().to_string(),
        scores,
        seed,
    })
}
