//! Central finite-difference verification of every differentiable op and of
//! the full model forward.
//!
//! Each check owns its parameter tensors and a builder that maps bound
//! parameter nodes to a scalar loss. The harness runs the builder once for
//! the analytic gradients, then twice per parameter element at ±1e-5 for the
//! numeric estimate. Graphs are built in train mode with a fixed dropout
//! seed so stochastic masks replay identically across the re-evaluations.
//! Pass criterion: |analytic − numeric| / max(|analytic|, |numeric|, 1e-4)
//! below 1e-4 for every element.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{self, BoundParams, FusionMode, ModelConfig, ModelParams};
use crate::tensor::{Graph, NodeId, Tensor};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const DROPOUT_SEED: u64 = 0x6ead_c4ec;

#[derive(Debug, Clone)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub parameter_count: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

struct Check {
    name: &'static str,
    params: Vec<Tensor>,
    build: Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>,
}

/// Deterministic values in ±[0.1, 1.1): bounded away from the relu/reglu
/// kinks so finite differences stay two-sided smooth.
fn fixture(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let magnitude = rng.random_range(0.1..1.1);
            if rng.random::<bool>() {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn run_check(check: &Check, corrupt_scale: f64) -> GradcheckEntry {
    let evaluate = |params: &[Tensor]| -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new(true, DROPOUT_SEED);
        let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
        let loss = (check.build)(&mut g, &ids);
        (g, ids, loss)
    };

    let (mut g, ids, loss) = evaluate(&check.params);
    g.backward(loss).expect("gradcheck loss must be scalar");
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(&check.params)
        .map(|(&id, p)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();

    let mut max_rel_err: f64 = 0.0;
    let mut parameter_count = 0;
    for (pi, base) in check.params.iter().enumerate() {
        for j in 0..base.len() {
            parameter_count += 1;
            let probe = |delta: f64| -> f64 {
                let mut params = check.params.clone();
                params[pi].data_mut()[j] += delta;
                let (g, _, loss) = evaluate(&params);
                g.value(loss).item()
            };
            let numeric = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
            let exact = analytic[pi].data()[j] * corrupt_scale;
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-4);
            max_rel_err = max_rel_err.max(rel);
        }
    }
    GradcheckEntry {
        name: check.name.to_string(),
        max_rel_err,
        parameter_count,
        passed: max_rel_err < GRADCHECK_TOLERANCE,
    }
}

fn op_checks() -> Vec<Check> {
    let mut checks: Vec<Check> = Vec::new();
    checks.push(Check {
        name: "matmul",
        params: vec![fixture(1, 3, 4), fixture(2, 4, 2)],
        build: Box::new(|g, ids| {
            let c = g.matmul(ids[0], ids[1]);
            let t = g.constant(fixture(0xffee, 3, 2));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "matmul_nt",
        params: vec![fixture(3, 3, 4), fixture(4, 2, 4)],
        build: Box::new(|g, ids| {
            let c = g.matmul_nt(ids[0], ids[1]);
            let t = g.constant(fixture(0xffef, 3, 2));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "transpose",
        params: vec![fixture(5, 3, 4)],
        build: Box::new(|g, ids| {
            let c = g.transpose(ids[0]);
            let t = g.constant(fixture(0xfff0, 4, 3));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "add",
        params: vec![fixture(6, 2, 5), fixture(7, 2, 5)],
        build: Box::new(|g, ids| {
            let c = g.add(ids[0], ids[1]);
            let t = g.constant(fixture(0xfff1, 2, 5));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "add_bias",
        params: vec![fixture(8, 3, 4), fixture(9, 1, 4)],
        build: Box::new(|g, ids| {
            let c = g.add_bias(ids[0], ids[1]);
            let t = g.constant(fixture(0xfff2, 3, 4));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "scale",
        params: vec![fixture(10, 2, 3)],
        build: Box::new(|g, ids| {
            let c = g.scale(ids[0], -1.7);
            let t = g.constant(fixture(0xfff3, 2, 3));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "row_scale",
        params: vec![fixture(11, 3, 4)],
        build: Box::new(|g, ids| {
            let c = g.row_scale(ids[0], &[0.5, -2.0, 1.25]);
            let t = g.constant(fixture(0xfff4, 3, 4));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "col_scale",
        params: vec![fixture(12, 3, 4), fixture(13, 1, 4)],
        build: Box::new(|g, ids| {
            let c = g.col_scale(ids[0], ids[1]);
            let t = g.constant(fixture(0xfff5, 3, 4));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "concat_rows",
        params: vec![fixture(14, 2, 3), fixture(15, 1, 3)],
        build: Box::new(|g, ids| {
            let c = g.concat_rows(&[ids[0], ids[1]]);
            let t = g.constant(fixture(0xfff6, 3, 3));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "concat_cols",
        params: vec![fixture(16, 2, 3), fixture(17, 2, 2)],
        build: Box::new(|g, ids| {
            let c = g.concat_cols(&[ids[0], ids[1]]);
            let t = g.constant(fixture(0xfff7, 2, 5));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "slice_rows",
        params: vec![fixture(18, 4, 3)],
        build: Box::new(|g, ids| {
            let c = g.slice_rows(ids[0], 1, 2);
            let t = g.constant(fixture(0xfff8, 2, 3));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "slice_cols",
        params: vec![fixture(19, 3, 5)],
        build: Box::new(|g, ids| {
            let c = g.slice_cols(ids[0], 2, 2);
            let t = g.constant(fixture(0xfff9, 3, 2));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "softmax_rows",
        params: vec![fixture(20, 3, 4)],
        build: Box::new(|g, ids| {
            let c = g.softmax_rows(ids[0]);
            let t = g.constant(fixture(0xfffa, 3, 4));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "layer_norm_rows",
        params: vec![fixture(21, 3, 6)],
        build: Box::new(|g, ids| {
            let c = g.layer_norm_rows(ids[0]);
            let t = g.constant(fixture(0xfffb, 3, 6));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "relu",
        params: vec![fixture(22, 3, 4)],
        build: Box::new(|g, ids| {
            let c = g.relu(ids[0]);
            let t = g.constant(fixture(0xfffc, 3, 4));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "reglu",
        params: vec![fixture(23, 3, 6)],
        build: Box::new(|g, ids| {
            let c = g.reglu(ids[0]);
            let t = g.constant(fixture(0xfffd, 3, 3));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "dropout",
        params: vec![fixture(24, 4, 5)],
        build: Box::new(|g, ids| {
            let c = g.dropout(ids[0], 0.4);
            let t = g.constant(fixture(0xfffe, 4, 5));
            g.mse_loss(c, t)
        }),
    });
    checks.push(Check {
        name: "mse_loss",
        params: vec![fixture(25, 2, 4), fixture(26, 2, 4)],
        build: Box::new(|g, ids| g.mse_loss(ids[0], ids[1])),
    });
    checks
}

fn model_check(name: &'static str, config: ModelConfig) -> Check {
    let init = ModelParams::init(&config);
    let names: Vec<String> = init.entries().iter().map(|(n, _)| n.clone()).collect();
    let params: Vec<Tensor> = init.entries().iter().map(|(_, t)| t.clone()).collect();
    let c = config.cluster_count;
    let batch = 2;
    let primary = fixture(0xabc0, batch, c);
    let helper = fixture(0xabc1, batch, c);
    let targets = fixture(0xabc2, batch, 1);
    let cross = config.fusion == FusionMode::CrossFusion;
    Check {
        name,
        params,
        build: Box::new(move |g, ids| {
            let bound = BoundParams::from_parts(
                names.iter().cloned().zip(ids.iter().copied()).collect(),
            );
            let rows = |t: &Tensor| -> Vec<Vec<f64>> {
                (0..t.rows())
                    .map(|r| (0..t.cols()).map(|c| t.get(r, c)).collect())
                    .collect()
            };
            let helper_rows = rows(&helper);
            let out = model::forward(
                g,
                &bound,
                &config,
                &rows(&primary),
                if cross { Some(&helper_rows) } else { None },
            )
            .expect("gradcheck forward");
            let t = g.constant(targets.clone());
            g.mse_loss(out.predictions, t)
        }),
    }
}

fn model_checks() -> Vec<Check> {
    let base = ModelConfig {
        cluster_count: 8,
        token_dim: 16,
        n_layers: 1,
        dropout_attn: 0.25,
        dropout_ffn: 0.15,
        dropout_residual: 0.1,
        seed: 2024,
        ..ModelConfig::default()
    };
    vec![
        model_check("sfformer_self", base.clone()),
        model_check(
            "sfformer_cross",
            ModelConfig {
                fusion: FusionMode::CrossFusion,
                ..base.clone()
            },
        ),
        model_check(
            "sfformer_cross_evolving",
            ModelConfig {
                fusion: FusionMode::CrossFusion,
                helper_evolves: true,
                ..base
            },
        ),
    ]
}

/// Run the whole suite. `corrupt` scales one analytic gradient by 1.001 so
/// callers can verify the harness actually detects wrong gradients.
pub fn run_gradcheck(corrupt: bool) -> GradcheckReport {
    let entries = op_checks()
        .into_iter()
        .chain(model_checks())
        .map(|check| {
            let scale = if corrupt && check.name == "matmul" {
                1.001
            } else {
                1.0
            };
            run_check(&check, scale)
        })
        .collect();
    GradcheckReport {
        entries,
        tolerance: GRADCHECK_TOLERANCE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_and_model_passes() {
        let report = run_gradcheck(false);
        for e in &report.entries {
            assert!(
                e.passed,
                "{} failed: max rel err {:.3e}",
                e.name, e.max_rel_err
            );
        }
    }

    #[test]
    fn coverage_lists_every_op_exactly_once() {
        let names: Vec<&'static str> = op_checks()
            .iter()
            .chain(model_checks().iter())
            .map(|c| c.name)
            .collect();
        let expected = [
            "matmul",
            "matmul_nt",
            "transpose",
            "add",
            "add_bias",
            "scale",
            "row_scale",
            "col_scale",
            "concat_rows",
            "concat_cols",
            "slice_rows",
            "slice_cols",
            "softmax_rows",
            "layer_norm_rows",
            "relu",
            "reglu",
            "dropout",
            "mse_loss",
            "sfformer_self",
            "sfformer_cross",
            "sfformer_cross_evolving",
        ];
        assert_eq!(names, expected);
        let mut dedup = names.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate op entries");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // Only the affected check needs to run to prove the harness catches
        // a wrong gradient; the CLI's --corrupt flag runs the full suite.
        let matmul = &op_checks()[0];
        assert_eq!(matmul.name, "matmul");
        assert!(run_check(matmul, 1.0).passed);
        assert!(!run_check(matmul, 1.001).passed);
    }
}
