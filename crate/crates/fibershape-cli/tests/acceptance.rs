//! Acceptance suite: nine end-to-end criteria covering descriptor oracles,
//! geometric invariance, gradient checking, architecture degeneracies, and
//! the full synth → features → train pipeline. Each criterion prints one
//! `PASS`/`FAIL` line (visible with `--nocapture`; cargo shows the lines
//! automatically when the test fails) and the test asserts that every
//! criterion passed.
//!
//! All tolerances and budgets are pinned as constants below. Everything is
//! seeded and runs the CLI with `--threads 1`, so the observed values are
//! bit-for-bit reproducible; the asserted thresholds still leave margin so
//! the suite is not a golden-file test.
//!
//! This is the slowest test target in the workspace (dominated by the ten
//! helper-selection repetitions of criterion 6); expect roughly 15–20
//! minutes on one core.

#[path = "../../fibershape/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fibershape::gradcheck;
use fibershape::matrix::{self, FeatureKind, FeatureMatrix};
use fibershape::model::{bind, forward, predict, FusionMode, ModelConfig, ModelParams};
use fibershape::shape::ShapeConfig;
use fibershape::synth::{self, GeometryFamily, SynthSpec, TargetRule};
use fibershape::tensor::{Graph, Tensor};
use fibershape::train::{self, FoldData, Hyperparams, TrainSettings};

// Criterion 1/2 sample sizes and budget.
const A1_CLUSTERS: u64 = 100;
const A1_BUDGET_SECS: f64 = 60.0;
const A2_CLUSTERS: u64 = 50;

// Criterion 3 budget; the pass threshold itself is the library's
// GRADCHECK_TOLERANCE (1e-4).
const A3_BUDGET_SECS: f64 = 120.0;

// Criterion 4 tolerances.
const A4_ROW_SUM_TOL: f64 = 1e-12;
const A4_PERMUTATIONS: usize = 20;
const A4_PERM_TOL: f64 = 1e-9;

// Criterion 5: dataset recipe and thresholds. The r floor and the fusion
// slack come from the acceptance contract; the training recipe (lr 1e-3,
// 120 epochs, patience 40, seed 5) was chosen once against this dataset and
// is deterministic.
const A5_SUBJECTS: &str = "200";
const A5_CLUSTERS: &str = "64";
const A5_STREAMLINES: &str = "30";
const A5_DATASET_SEED: &str = "20";
const A5_CV_ARGS: [&str; 8] = [
    "--lr", "1e-3", "--epochs", "120", "--patience", "40", "--seed", "5",
];
const A5_MIN_R: f64 = 0.85;
const A5_FUSION_SLACK: f64 = 0.02;
const A5_BUDGET_SECS: f64 = 600.0;

// Criterion 6: selection budget (cheaper than the cv recipe — selection only
// has to rank features) and the required win count.
const A6_REPS: u64 = 10;
const A6_MIN_WINS: usize = 9;
const A6_SETTINGS: TrainSettings = TrainSettings {
    batch_size: 8,
    max_epochs: 30,
    patience: 10,
};

// Criterion 7: null-control ceiling.
const A7_SUBJECTS: usize = 60;
const A7_MAX_ABS_R: f64 = 0.3;

// Criterion 9: overfit target.
const A9_MAX_MSE: f64 = 1e-3;
const A9_SETTINGS: TrainSettings = TrainSettings {
    batch_size: 8,
    max_epochs: 500,
    patience: 50,
};

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().expect("create temp dir");
    let mut failures: Vec<String> = Vec::new();
    let mut feat_dir: Option<PathBuf> = None;

    report("A1 descriptor oracles", a1_descriptor_oracles(), &mut failures);
    report("A2 geometric invariance", a2_geometric_invariance(), &mut failures);
    report("A3 gradcheck", a3_gradcheck(), &mut failures);
    report("A4 architecture degeneracy", a4_architecture_degeneracy(), &mut failures);
    report(
        "A5 synthetic recovery",
        a5_synthetic_recovery(tmp.path(), &mut feat_dir),
        &mut failures,
    );
    report("A6 helper selection", a6_helper_selection(feat_dir.as_deref()), &mut failures);
    report("A7 null control", a7_null_control(), &mut failures);
    report("A8 determinism", a8_determinism(tmp.path()), &mut failures);
    report("A9 overfit capacity", a9_overfit_capacity(), &mut failures);

    assert!(
        failures.is_empty(),
        "{} acceptance criteria failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}

fn report(label: &str, result: Result<String, String>, failures: &mut Vec<String>) {
    match result {
        Ok(detail) => println!("{label}: PASS — {detail}"),
        Err(detail) => {
            println!("{label}: FAIL — {detail}");
            failures.push(format!("{label}: {detail}"));
        }
    }
}

// ---------------------------------------------------------------------------
// CLI plumbing
// ---------------------------------------------------------------------------

/// Run the CLI with `--threads 1`, returning stdout or a failure summary.
fn run_cli(args: &[&str]) -> Result<String, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_fibershape"))
        .args(args)
        .args(["--threads", "1"])
        .output()
        .map_err(|e| format!("failed to spawn CLI: {e}"))?;
    if !output.status.success() {
        return Err(format!(
            "`fibershape {}` exited with {:?}: {}",
            args.join(" "),
            output.status.code(),
            String::from_utf8_lossy(&output.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

fn read_r_mean(path: &Path) -> Result<f64, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("read {}: {e}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| format!("parse {}: {e}", path.display()))?;
    value["r_mean"]
        .as_f64()
        .ok_or_else(|| format!("{} has no numeric r_mean", path.display()))
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

/// 100 seeded random clusters: all 12 descriptors plus FA/MD/NoS match the
/// independent brute-force oracles — exact for voxel/streamline counts,
/// 1e-9 relative for analytic quantities — within the time budget.
fn a1_descriptor_oracles() -> Result<String, String> {
    let start = Instant::now();
    for seed in 0..A1_CLUSTERS {
        let g = support::random_cluster(seed);
        support::check_cluster_oracles(&g, 1.0);
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= A1_BUDGET_SECS {
        return Err(format!("oracle sweep took {elapsed:.1} s (budget {A1_BUDGET_SECS} s)"));
    }
    Ok(format!(
        "{A1_CLUSTERS} clusters, counts exact, analytics ≤ 1e-9 rel, {elapsed:.2} s"
    ))
}

/// 50 seeded random clusters: rigid-motion invariance at 1e-9, exact
/// integer-translation invariance (bitwise on dyadic coordinates), scale
/// covariance (bitwise for powers of two, 1e-9 for 1.7), and
/// trunk + branch == volume exactly in every case.
fn a2_geometric_invariance() -> Result<String, String> {
    for seed in 0..A2_CLUSTERS {
        support::check_invariance(seed);
    }
    Ok(format!(
        "{A2_CLUSTERS} clusters × (rigid motion, integer shift, scale 2/0.5/1.7), trunk+branch exact"
    ))
}

/// Central finite differences confirm every differentiable op and the full
/// 1-layer SFFormer (C=8, d=16) below the library tolerance of 1e-4.
fn a3_gradcheck() -> Result<String, String> {
    let start = Instant::now();
    let report = gradcheck::run_gradcheck(false);
    let elapsed = start.elapsed().as_secs_f64();
    let worst = report
        .entries
        .iter()
        .map(|e| e.max_rel_err)
        .fold(0.0f64, f64::max);
    if !report.all_passed() {
        let failed: Vec<&str> = report
            .entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| e.name.as_str())
            .collect();
        return Err(format!("ops over tolerance: {}", failed.join(", ")));
    }
    if elapsed >= A3_BUDGET_SECS {
        return Err(format!("gradcheck took {elapsed:.1} s (budget {A3_BUDGET_SECS} s)"));
    }
    Ok(format!(
        "{} checks, max rel err {worst:.2e} < {:.0e}, {elapsed:.1} s",
        report.entries.len(),
        report.tolerance
    ))
}

fn tiny_config(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        cluster_count: 8,
        token_dim: 16,
        n_layers: 1,
        fusion,
        seed: 42,
        ..ModelConfig::default()
    }
}

fn random_x(seed: u64, c: usize, batch: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

/// Cross-attention with shared tokenizers and identical streams equals the
/// self-attention baseline bit-for-bit; attention rows sum to 1 within
/// 1e-12; the CLS readout is invariant to cluster permutation (with the
/// tokenizer rows permuted alongside) on 20 random permutations.
fn a4_architecture_degeneracy() -> Result<String, String> {
    // Degeneracy: cross(x, x) == self(x) with copied tokenizer parameters.
    let self_params = ModelParams::init(&tiny_config(FusionMode::SelfBaseline));
    let mut cross_params = ModelParams::init(&tiny_config(FusionMode::CrossFusion));
    cross_params.set(
        "tok.helper.w",
        self_params.get("tok.primary.w").unwrap().clone(),
    );
    cross_params.set(
        "tok.helper.b",
        self_params.get("tok.primary.b").unwrap().clone(),
    );
    let x = random_x(401, 8, 4);
    let base = predict(&self_params, &x, None).map_err(|e| e.to_string())?;
    let fused = predict(&cross_params, &x, Some(&x)).map_err(|e| e.to_string())?;
    if base != fused {
        return Err(format!("cross(x, x) != self(x): {fused:?} vs {base:?}"));
    }

    // Attention rows are softmax outputs: each must sum to 1 in eval mode.
    let cfg = tiny_config(FusionMode::SelfBaseline);
    let params = ModelParams::init(&cfg);
    let ax = random_x(402, 8, 3);
    let mut g = Graph::new(false, 0);
    let bound = bind(&mut g, &params);
    let out = forward(&mut g, &bound, &cfg, &ax, None).map_err(|e| e.to_string())?;
    let mut rows_checked = 0usize;
    for &p in &out.attention {
        let t = g.value(p);
        for r in 0..t.rows() {
            let sum: f64 = (0..t.cols()).map(|c| t.get(r, c)).sum();
            if (sum - 1.0).abs() >= A4_ROW_SUM_TOL {
                return Err(format!("attention row sums to {sum}, |sum-1| ≥ {A4_ROW_SUM_TOL}"));
            }
            rows_checked += 1;
        }
    }

    // CLS permutation invariance: permuting clusters together with the
    // per-cluster tokenizer rows changes only float summation order.
    let base = predict(&params, &random_x(403, 8, 1), None).map_err(|e| e.to_string())?[0];
    let x = random_x(403, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_rel = 0.0f64;
    for _ in 0..A4_PERMUTATIONS {
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut rng);
        let mut permuted = params.clone();
        for name in ["tok.primary.w", "tok.primary.b"] {
            let t = params.get(name).unwrap();
            let mut data = Vec::with_capacity(t.len());
            for &src in &perm {
                data.extend((0..t.cols()).map(|k| t.get(src, k)));
            }
            permuted.set(name, Tensor::from_vec(t.rows(), t.cols(), data));
        }
        let px: Vec<Vec<f64>> = vec![perm.iter().map(|&s| x[0][s]).collect()];
        let got = predict(&permuted, &px, None).map_err(|e| e.to_string())?[0];
        let rel = (got - base).abs() / base.abs().max(1.0);
        worst_rel = worst_rel.max(rel);
        if rel > A4_PERM_TOL {
            return Err(format!(
                "permutation {perm:?} moved the CLS output by {rel:.3e} (> {A4_PERM_TOL:.0e})"
            ));
        }
    }

    Ok(format!(
        "bitwise degeneracy, {rows_checked} attention rows sum to 1 ± 1e-12, \
         {A4_PERMUTATIONS} permutations ≤ {worst_rel:.2e} rel"
    ))
}

/// Full pipeline on a planted-volume cohort (S=200, C=64, σ=0.3): the
/// volume baseline recovers the target at r ≥ 0.85, and on a two-feature
/// target cross-fusion with the correct helper stays within 0.02 of the
/// volume baseline — all within the 10-minute single-thread budget.
fn a5_synthetic_recovery(
    tmp: &Path,
    feat_dir: &mut Option<PathBuf>,
) -> Result<String, String> {
    let start = Instant::now();
    let data = tmp.join("a5_data");
    let feat = tmp.join("a5_feat");
    run_cli(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--subjects",
        A5_SUBJECTS,
        "--clusters",
        A5_CLUSTERS,
        "--streamlines",
        A5_STREAMLINES,
        "--family",
        "arcs",
        "--seed",
        A5_DATASET_SEED,
        "--target",
        "SYNTH:volume=1:sigma=0.3",
        "--target",
        "TWO:volume=1,diameter=1:sigma=0.3",
    ])?;
    run_cli(&[
        "features",
        "--input",
        data.to_str().unwrap(),
        "--out",
        feat.to_str().unwrap(),
    ])?;
    *feat_dir = Some(feat.clone());

    let cv = |extra: &[&str], out: &Path| -> Result<f64, String> {
        let mut args = vec!["cv", "--input", feat.to_str().unwrap(), "--feature", "volume"];
        args.extend_from_slice(extra);
        args.extend_from_slice(&A5_CV_ARGS);
        args.push("--out");
        args.push(out.to_str().unwrap());
        run_cli(&args)?;
        read_r_mean(out)
    };

    let r_synth = cv(&["--assessment", "SYNTH"], &tmp.join("a5_synth.json"))?;
    let r_base = cv(&["--assessment", "TWO"], &tmp.join("a5_base.json"))?;
    let r_cross = cv(
        &["--assessment", "TWO", "--fusion", "cross", "--helper", "diameter"],
        &tmp.join("a5_cross.json"),
    )?;
    let elapsed = start.elapsed().as_secs_f64();

    if r_synth < A5_MIN_R {
        return Err(format!("volume baseline r {r_synth:.3} < {A5_MIN_R}"));
    }
    if r_cross < r_base - A5_FUSION_SLACK {
        return Err(format!(
            "cross-fusion r {r_cross:.3} < baseline {r_base:.3} − {A5_FUSION_SLACK}"
        ));
    }
    if elapsed >= A5_BUDGET_SECS {
        return Err(format!("pipeline took {elapsed:.0} s (budget {A5_BUDGET_SECS} s)"));
    }
    Ok(format!(
        "volume r {r_synth:.3} ≥ {A5_MIN_R}; cross {r_cross:.3} ≥ baseline {r_base:.3} − \
         {A5_FUSION_SLACK}; {elapsed:.0} s"
    ))
}

/// On the criterion-5 planted-volume dataset, select_helper_feature must
/// pick "volume" in at least 9 of 10 seeded repetitions.
fn a6_helper_selection(feat_dir: Option<&Path>) -> Result<String, String> {
    let feat = feat_dir.ok_or("criterion 5 did not produce a feature directory")?;
    let scores = matrix::read_scores_csv(&feat.join("scores.csv")).map_err(|e| e.to_string())?;
    let mut mats: Vec<FeatureMatrix> = Vec::with_capacity(FeatureKind::SHAPE.len());
    for kind in FeatureKind::SHAPE {
        let mut m = matrix::read_wide_csv(&feat.join(format!("{}.csv", kind.name())), kind)
            .map_err(|e| e.to_string())?;
        m.target = m
            .subject_ids
            .iter()
            .map(|id| scores[id]["SYNTH"])
            .collect();
        mats.push(m);
    }

    let config = ModelConfig {
        fusion: FusionMode::SelfBaseline,
        ..ModelConfig::default()
    };
    let hyper = Hyperparams::default(); // lr 1e-3
    let mut wins = 0usize;
    let mut picks = Vec::with_capacity(A6_REPS as usize);
    for seed in 0..A6_REPS {
        let report = train::select_helper_feature(&mats, &config, &hyper, &A6_SETTINGS, seed)
            .map_err(|e| format!("selection rep {seed} failed: {e}"))?;
        if report.selected == "volume" {
            wins += 1;
        }
        picks.push(report.selected);
    }
    if wins < A6_MIN_WINS {
        return Err(format!(
            "volume selected only {wins}/{A6_REPS} times (need ≥ {A6_MIN_WINS}): {picks:?}"
        ));
    }
    Ok(format!("volume selected {wins}/{A6_REPS} times (need ≥ {A6_MIN_WINS})"))
}

/// Shuffled targets on a 60-subject cohort must not correlate: |mean r|
/// below 0.3 guards against leakage in the CV harness.
fn a7_null_control() -> Result<String, String> {
    let spec = SynthSpec {
        subjects: A7_SUBJECTS,
        clusters: 8,
        streamlines: 30,
        family: GeometryFamily::Arcs,
        targets: vec![TargetRule {
            name: "SYNTH".to_string(),
            weights: vec![(FeatureKind::Volume, 1.0)],
            noise_sigma: 0.3,
        }],
        seed: 77,
        spacing: 1.0,
        with_scalar_maps: false,
    };
    let data = synth::generate(&spec).map_err(|e| e.to_string())?;
    let features: Vec<_> = data
        .subjects
        .iter()
        .map(|s| matrix::extract_features(s, &ShapeConfig::default()))
        .collect();
    let mut m = matrix::assemble(&features, FeatureKind::Volume, "SYNTH")
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x0711);
    m.target.shuffle(&mut rng);

    let config = ModelConfig {
        fusion: FusionMode::SelfBaseline,
        ..ModelConfig::default()
    };
    let report = train::cross_validate(&m, None, &config, &Hyperparams::default(), &A6_SETTINGS, 0)
        .map_err(|e| e.to_string())?;
    if report.r_mean.abs() >= A7_MAX_ABS_R {
        return Err(format!(
            "permuted targets correlate at |{:.3}| ≥ {A7_MAX_ABS_R}",
            report.r_mean
        ));
    }
    Ok(format!(
        "permuted targets: |r {:.3}| < {A7_MAX_ABS_R} over {} subjects",
        report.r_mean, A7_SUBJECTS
    ))
}

/// cmd_cv run twice with the same seed on one thread writes byte-identical
/// reports.
fn a8_determinism(tmp: &Path) -> Result<String, String> {
    let data = tmp.join("a8_data");
    let feat = tmp.join("a8_feat");
    run_cli(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--subjects",
        "12",
        "--clusters",
        "4",
        "--streamlines",
        "12",
        "--family",
        "rods",
        "--seed",
        "3",
        "--target",
        "SYNTH:volume=1:sigma=0.2",
    ])?;
    run_cli(&[
        "features",
        "--input",
        data.to_str().unwrap(),
        "--out",
        feat.to_str().unwrap(),
    ])?;
    let mut reports = Vec::new();
    for name in ["a8_rep1.json", "a8_rep2.json"] {
        let out = tmp.join(name);
        run_cli(&[
            "cv",
            "--input",
            feat.to_str().unwrap(),
            "--feature",
            "volume",
            "--assessment",
            "SYNTH",
            "--lr",
            "1e-3",
            "--epochs",
            "15",
            "--patience",
            "5",
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ])?;
        reports.push(fs::read(&out).map_err(|e| format!("read {}: {e}", out.display()))?);
    }
    if reports[0] != reports[1] {
        return Err("two identically-seeded cv runs wrote different reports".to_string());
    }
    Ok(format!("two seeded runs, byte-identical reports ({} bytes)", reports[0].len()))
}

/// The model memorizes 8 subjects: training MSE below 1e-3 within 500
/// epochs at batch size 8, patience 50 (validation == training set, so the
/// early-stopping loss is the training MSE).
fn a9_overfit_capacity() -> Result<String, String> {
    let spec = SynthSpec {
        subjects: 8,
        clusters: 8,
        streamlines: 12,
        family: GeometryFamily::Arcs,
        targets: vec![TargetRule {
            name: "SYNTH".to_string(),
            weights: vec![(FeatureKind::Volume, 1.0)],
            noise_sigma: 0.3,
        }],
        seed: 88,
        spacing: 1.0,
        with_scalar_maps: false,
    };
    let data = synth::generate(&spec).map_err(|e| e.to_string())?;
    let features: Vec<_> = data
        .subjects
        .iter()
        .map(|s| matrix::extract_features(s, &ShapeConfig::default()))
        .collect();
    let m = matrix::assemble(&features, FeatureKind::Volume, "SYNTH")
        .map_err(|e| e.to_string())?;

    let rows: Vec<usize> = (0..m.n_subjects()).collect();
    let stats = matrix::zscore_fit(&m, &rows).map_err(|e| e.to_string())?;
    let mut normalized = matrix::zscore_apply(&m, &stats).map_err(|e| e.to_string())?;
    let (t_mean, t_std) = matrix::scalar_stats(&normalized.target, &rows)
        .map_err(|e| e.to_string())?;
    for t in &mut normalized.target {
        *t = (*t - t_mean) / t_std;
    }

    let fold = FoldData {
        primary: &normalized,
        helper: None,
        train_rows: &rows,
        val_rows: &rows,
    };
    let config = ModelConfig {
        fusion: FusionMode::SelfBaseline,
        ..ModelConfig::default()
    };
    let hyper = Hyperparams {
        learning_rate: 3e-3,
        ..Hyperparams::default()
    };
    let outcome = train::train(&fold, &config, &hyper, &A9_SETTINGS, 0)
        .map_err(|e| e.to_string())?;
    if outcome.best_val_loss >= A9_MAX_MSE {
        return Err(format!(
            "training MSE {:.2e} ≥ {A9_MAX_MSE:.0e} after {} epochs (best epoch {})",
            outcome.best_val_loss,
            outcome.history.len(),
            outcome.best_epoch
        ));
    }
    Ok(format!(
        "training MSE {:.2e} < {A9_MAX_MSE:.0e} at epoch {} of ≤ {}",
        outcome.best_val_loss, outcome.best_epoch, A9_SETTINGS.max_epochs
    ))
}
