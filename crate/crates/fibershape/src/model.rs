//! The SFFormer: per-cluster feature tokenization, a pre-norm transformer
//! encoder stack, and a CLS regression head, with either self-attention
//! (single stream) or multi-head cross-attention feature fusion (primary
//! stream as Q, helper stream as K/V).
//!
//! Parameter initialization derives one RNG per named tensor from
//! `(config.seed, name)`, so two models sharing a seed hold bit-identical
//! common parameters regardless of whether the helper stream exists. That
//! property, plus each encoder layer normalizing its K/V input with its own
//! attention layer-norm, makes cross-fusion on two identical streams with
//! shared tokenizer parameters reproduce the self-attention baseline
//! bit-for-bit (at one layer for the default fixed helper, at any depth with
//! `helper_evolves`, in eval mode).
//!
//! Checkpoints pair the tensor payload (`<stem>.ckpt`) with a key=value
//! config file (`<stem>.cfg`).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    SelfBaseline,
    CrossFusion,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::SelfBaseline => write!(f, "self"),
            FusionMode::CrossFusion => write!(f, "cross"),
        }
    }
}

impl FromStr for FusionMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "self" => Ok(FusionMode::SelfBaseline),
            "cross" => Ok(FusionMode::CrossFusion),
            other => Err(ModelError::BadFusionMode {
                got: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub cluster_count: usize,
    pub token_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout_attn: f64,
    pub dropout_ffn: f64,
    pub dropout_residual: f64,
    pub fusion: FusionMode,
    /// Replace the CLS readout with mean pooling over all tokens.
    pub mean_pool_readout: bool,
    /// Advance the helper K/V sequence through the encoder layers
    /// (self-attending) instead of keeping it fixed per forward.
    pub helper_evolves: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cluster_count: 953,
            token_dim: 64,
            n_layers: 1,
            n_heads: 8,
            dropout_attn: 0.0,
            dropout_ffn: 0.0,
            dropout_residual: 0.0,
            fusion: FusionMode::SelfBaseline,
            mean_pool_readout: false,
            helper_evolves: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Enforce the published hyperparameter ranges. Unit tests exercise
    /// smaller shapes by constructing the struct directly; every user-facing
    /// path validates.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cluster_count < 1 {
            return Err(ModelError::ClusterCount {
                got: self.cluster_count,
            });
        }
        if self.n_heads != 8 {
            return Err(ModelError::Heads { got: self.n_heads });
        }
        if !(64..=512).contains(&self.token_dim) || self.token_dim % self.n_heads != 0 {
            return Err(ModelError::TokenDim {
                got: self.token_dim,
            });
        }
        if !(1..=4).contains(&self.n_layers) {
            return Err(ModelError::Layers { got: self.n_layers });
        }
        for (name, value, hi) in [
            ("dropout_attn", self.dropout_attn, 0.5),
            ("dropout_ffn", self.dropout_ffn, 0.5),
            ("dropout_residual", self.dropout_residual, 0.2),
        ] {
            if !(0.0..=hi).contains(&value) || !value.is_finite() {
                return Err(ModelError::Dropout {
                    name,
                    got: value,
                    hi,
                });
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }

    /// ReGLU hidden width: 4d/3 rounded to the nearest even integer, so the
    /// pre-activation projection is d×2f.
    pub fn ffn_hidden(&self) -> usize {
        2 * ((4 * self.token_dim + 3) / 6)
    }

    /// Canonical parameter list: (name, shape) in creation order.
    pub fn parameter_shapes(&self) -> Vec<(String, [usize; 2])> {
        let (c, d) = (self.cluster_count, self.token_dim);
        let f = self.ffn_hidden();
        let mut out: Vec<(String, [usize; 2])> = vec![
            ("tok.primary.w".into(), [c, d]),
            ("tok.primary.b".into(), [c, d]),
        ];
        if self.fusion == FusionMode::CrossFusion {
            out.push(("tok.helper.w".into(), [c, d]));
            out.push(("tok.helper.b".into(), [c, d]));
        }
        out.push(("cls".into(), [1, d]));
        for i in 0..self.n_layers {
            for (suffix, shape) in [
                ("attn.ln.g", [1, d]),
                ("attn.ln.s", [1, d]),
                ("attn.wq", [d, d]),
                ("attn.bq", [1, d]),
                ("attn.wk", [d, d]),
                ("attn.bk", [1, d]),
                ("attn.wv", [d, d]),
                ("attn.bv", [1, d]),
                ("attn.wo", [d, d]),
                ("attn.bo", [1, d]),
                ("ffn.ln.g", [1, d]),
                ("ffn.ln.s", [1, d]),
                ("ffn.w1", [d, 2 * f]),
                ("ffn.b1", [1, 2 * f]),
                ("ffn.w2", [f, d]),
                ("ffn.b2", [1, d]),
            ] {
                out.push((format!("layer{i}.{suffix}"), shape));
            }
        }
        out.push(("head.ln.g".into(), [1, d]));
        out.push(("head.ln.s".into(), [1, d]));
        out.push(("head.w".into(), [d, 1]));
        out.push(("head.b".into(), [1, 1]));
        out
    }

    fn to_config_text(&self) -> String {
        format!(
            "cluster_count={}\ntoken_dim={}\nn_layers={}\nn_heads={}\n\
             dropout_attn={}\ndropout_ffn={}\ndropout_residual={}\n\
             fusion={}\nmean_pool_readout={}\nhelper_evolves={}\nseed={}\n",
            self.cluster_count,
            self.token_dim,
            self.n_layers,
            self.n_heads,
            self.dropout_attn,
            self.dropout_ffn,
            self.dropout_residual,
            self.fusion,
            self.mean_pool_readout,
            self.helper_evolves,
            self.seed,
        )
    }

    fn from_config_text(text: &str) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: &str| ModelError::ConfigSyntax {
                line: i + 1,
                msg: msg.to_string(),
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax("expected key=value"))?;
            match key {
                "cluster_count" => {
                    cfg.cluster_count = value.parse().map_err(|_| syntax("bad integer"))?
                }
                "token_dim" => cfg.token_dim = value.parse().map_err(|_| syntax("bad integer"))?,
                "n_layers" => cfg.n_layers = value.parse().map_err(|_| syntax("bad integer"))?,
                "n_heads" => cfg.n_heads = value.parse().map_err(|_| syntax("bad integer"))?,
                "dropout_attn" => {
                    cfg.dropout_attn = value.parse().map_err(|_| syntax("bad float"))?
                }
                "dropout_ffn" => cfg.dropout_ffn = value.parse().map_err(|_| syntax("bad float"))?,
                "dropout_residual" => {
                    cfg.dropout_residual = value.parse().map_err(|_| syntax("bad float"))?
                }
                "fusion" => cfg.fusion = value.parse()?,
                "mean_pool_readout" => {
                    cfg.mean_pool_readout = value.parse().map_err(|_| syntax("bad bool"))?
                }
                "helper_evolves" => {
                    cfg.helper_evolves = value.parse().map_err(|_| syntax("bad bool"))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| syntax("bad integer"))?,
                other => {
                    return Err(ModelError::ConfigSyntax {
                        line: i + 1,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cluster_count must be >= 1, got {got}")]
    ClusterCount { got: usize },
    #[error("token_dim must be in [64, 512] and divisible by 8, got {got}")]
    TokenDim { got: usize },
    #[error("n_layers must be in [1, 4], got {got}")]
    Layers { got: usize },
    #[error("n_heads is fixed at 8, got {got}")]
    Heads { got: usize },
    #[error("{name} must be in [0, {hi}], got {got}")]
    Dropout {
        name: &'static str,
        got: f64,
        hi: f64,
    },
    #[error("fusion mode must be \"self\" or \"cross\", got {got:?}")]
    BadFusionMode { got: String },
    #[error("cross fusion requires a helper feature stream")]
    MissingHelper,
    #[error("self-attention baseline takes no helper stream")]
    UnexpectedHelper,
    #[error("{stream} feature vector has {got} entries, expected {expected}")]
    FeatureLength {
        stream: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{stream} feature {index} of sample {sample} is not finite")]
    NonFiniteFeature {
        stream: &'static str,
        sample: usize,
        index: usize,
    },
    #[error("forward needs at least one sample")]
    EmptyBatch,
    #[error("parameter {name:?} missing from checkpoint")]
    MissingParam { name: String },
    #[error("parameter {name:?} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: [usize; 2],
        got: [usize; 2],
    },
    #[error("config file {path}: line {line}: {msg}")]
    ConfigFile {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("config text line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// One RNG per tensor, independent of which other tensors exist.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name)))
}

/// Named parameter tensors plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    /// He-initialize all weights (Normal with variance 2/fan_in), zero
    /// biases except the tokenizer biases (Uniform(−1/√d, 1/√d)), CLS
    /// Normal(0, 2/d), layer-norm gains 1 and shifts 0. Fully determined by
    /// `config.seed`.
    pub fn init(config: &ModelConfig) -> Self {
        let d = config.token_dim;
        let f = config.ffn_hidden();
        let entries = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, [rows, cols])| {
                let mut rng = param_rng(config.seed, &name);
                let leaf = name.rsplit('.').next().unwrap();
                let data: Vec<f64> = if name == "cls" {
                    let dist = Normal::new(0.0, (2.0 / d as f64).sqrt()).unwrap();
                    (0..rows * cols).map(|_| dist.sample(&mut rng)).collect()
                } else if name.starts_with("tok.") && leaf == "b" {
                    let k = 1.0 / (d as f64).sqrt();
                    (0..rows * cols).map(|_| rng.random_range(-k..k)).collect()
                } else if leaf == "g" {
                    vec![1.0; rows * cols]
                } else if leaf.starts_with('b') || leaf == "s" {
                    vec![0.0; rows * cols]
                } else {
                    // Weight matrices: fan_in is the contracted dimension of
                    // x·W; the tokenizer's per-cluster rows use d so token
                    // magnitudes match the CLS scale.
                    let fan_in = match leaf {
                        "w" => d,            // tokenizer rows, head.w (d×1)
                        "w1" | "wq" | "wk" | "wv" | "wo" => rows, // = d
                        "w2" => f,
                        _ => rows,
                    };
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    (0..rows * cols).map(|_| dist.sample(&mut rng)).collect()
                };
                (name, Tensor::from_vec(rows, cols, data))
            })
            .collect();
        Self {
            config: config.clone(),
            entries,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.1.shape(), tensor.shape(), "shape change for {name}");
        slot.1 = tensor;
    }

    /// Write `<stem>.ckpt` (tensors) and `<stem>.cfg` (config).
    pub fn save(&self, stem: &Path) -> Result<(), ModelError> {
        let cfg_path = stem.with_extension("cfg");
        std::fs::write(&cfg_path, self.config.to_config_text()).map_err(|source| {
            ModelError::Io {
                path: cfg_path.clone(),
                source,
            }
        })?;
        checkpoint::write_checkpoint(&stem.with_extension("ckpt"), &self.entries)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, ModelError> {
        let cfg_path = stem.with_extension("cfg");
        let text = std::fs::read_to_string(&cfg_path).map_err(|source| ModelError::Io {
            path: cfg_path.clone(),
            source,
        })?;
        let config = ModelConfig::from_config_text(&text).map_err(|e| match e {
            ModelError::ConfigSyntax { line, msg } => ModelError::ConfigFile {
                path: cfg_path.clone(),
                line,
                msg,
            },
            other => other,
        })?;
        let tensors = checkpoint::read_checkpoint(&stem.with_extension("ckpt"))?;
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, expected) in config.parameter_shapes() {
            let tensor = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| ModelError::MissingParam { name: name.clone() })?;
            if tensor.shape() != expected {
                return Err(ModelError::ParamShape {
                    name,
                    expected,
                    got: tensor.shape(),
                });
            }
            entries.push((name, tensor));
        }
        Ok(Self { config, entries })
    }
}

/// Parameter nodes registered in a graph, looked up by name.
pub struct BoundParams {
    ids: Vec<(String, NodeId)>,
}

impl BoundParams {
    /// Assemble from pre-registered nodes (the gradcheck harness binds
    /// parameters itself so it can perturb them).
    pub(crate) fn from_parts(ids: Vec<(String, NodeId)>) -> Self {
        Self { ids }
    }

    pub fn get(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn ids(&self) -> &[(String, NodeId)] {
        &self.ids
    }
}

/// Register every parameter as a trainable graph leaf.
pub fn bind(g: &mut Graph, params: &ModelParams) -> BoundParams {
    BoundParams {
        ids: params
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), g.param(t.clone())))
            .collect(),
    }
}

struct LayerIds {
    ln_g: NodeId,
    ln_s: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ffn_ln_g: NodeId,
    ffn_ln_s: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl LayerIds {
    fn collect(bound: &BoundParams, layer: usize) -> Self {
        let p = |suffix: &str| bound.get(&format!("layer{layer}.{suffix}"));
        Self {
            ln_g: p("attn.ln.g"),
            ln_s: p("attn.ln.s"),
            wq: p("attn.wq"),
            bq: p("attn.bq"),
            wk: p("attn.wk"),
            bk: p("attn.bk"),
            wv: p("attn.wv"),
            bv: p("attn.bv"),
            wo: p("attn.wo"),
            bo: p("attn.bo"),
            ffn_ln_g: p("ffn.ln.g"),
            ffn_ln_s: p("ffn.ln.s"),
            w1: p("ffn.w1"),
            b1: p("ffn.b1"),
            w2: p("ffn.w2"),
            b2: p("ffn.b2"),
        }
    }
}

fn layer_norm_affine(g: &mut Graph, x: NodeId, gain: NodeId, shift: NodeId) -> NodeId {
    let n = g.layer_norm_rows(x);
    let scaled = g.col_scale(n, gain);
    g.add_bias(scaled, shift)
}

/// Prediction node (B×1) plus the attention probability matrices, one per
/// (layer, sample, head) in that nesting order, recorded before attention
/// dropout (identical in eval mode).
pub struct ForwardOutput {
    pub predictions: NodeId,
    pub attention: Vec<NodeId>,
}

/// K/V source for one encoder layer application.
enum KvSource {
    /// Self-attention: K/V are the layer's own normalized Q input.
    SelfSame,
    /// Cross-attention on a raw token sequence; the layer applies its own
    /// attention layer-norm to it.
    Raw(NodeId),
}

/// One pre-norm encoder layer over a stacked token matrix (B·(C+1))×d:
/// `u = q + resdrop(MHA(LN(q), LN(kv)))`, then
/// `out = u + resdrop(ffndrop(FFN(LN(u))))` with a ReGLU feed-forward.
#[allow(clippy::too_many_arguments)]
fn encoder_layer(
    g: &mut Graph,
    ids: &LayerIds,
    q: NodeId,
    kv: KvSource,
    config: &ModelConfig,
    batch: usize,
    attention_out: &mut Vec<NodeId>,
) -> NodeId {
    let heads = config.n_heads;
    let dh = config.head_dim();
    let tokens = config.cluster_count + 1;

    let qn = layer_norm_affine(g, q, ids.ln_g, ids.ln_s);
    let kvn = match kv {
        KvSource::SelfSame => qn,
        KvSource::Raw(raw) => layer_norm_affine(g, raw, ids.ln_g, ids.ln_s),
    };

    let qm = g.matmul(qn, ids.wq);
    let qp = g.add_bias(qm, ids.bq);
    let km = g.matmul(kvn, ids.wk);
    let kp = g.add_bias(km, ids.bk);
    let vm = g.matmul(kvn, ids.wv);
    let vp = g.add_bias(vm, ids.bv);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut sample_outputs = Vec::with_capacity(batch);
    for s in 0..batch {
        let qs = g.slice_rows(qp, s * tokens, tokens);
        let ks = g.slice_rows(kp, s * tokens, tokens);
        let vs = g.slice_rows(vp, s * tokens, tokens);
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(qs, h * dh, dh);
            let kh = g.slice_cols(ks, h * dh, dh);
            let vh = g.slice_cols(vs, h * dh, dh);
            let logits = g.matmul_nt(qh, kh);
            let scaled = g.scale(logits, scale);
            let probs = g.softmax_rows(scaled);
            attention_out.push(probs);
            let dropped = g.dropout(probs, config.dropout_attn);
            head_outputs.push(g.matmul(dropped, vh));
        }
        sample_outputs.push(g.concat_cols(&head_outputs));
    }
    let concat = g.concat_rows(&sample_outputs);
    let om = g.matmul(concat, ids.wo);
    let attn = g.add_bias(om, ids.bo);
    let attn_dropped = g.dropout(attn, config.dropout_residual);
    let u = g.add(q, attn_dropped);

    let un = layer_norm_affine(g, u, ids.ffn_ln_g, ids.ffn_ln_s);
    let h1m = g.matmul(un, ids.w1);
    let h1 = g.add_bias(h1m, ids.b1);
    let gated = g.reglu(h1);
    let h2m = g.matmul(gated, ids.w2);
    let ffn = g.add_bias(h2m, ids.b2);
    let ffn_dropped = g.dropout(ffn, config.dropout_ffn);
    let ffn_res = g.dropout(ffn_dropped, config.dropout_residual);
    g.add(u, ffn_res)
}

fn check_stream(
    rows: &[Vec<f64>],
    c: usize,
    stream: &'static str,
) -> Result<(), ModelError> {
    for (sample, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(ModelError::FeatureLength {
                stream,
                expected: c,
                got: row.len(),
            });
        }
        if let Some(index) = row.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFeature {
                stream,
                sample,
                index,
            });
        }
    }
    Ok(())
}

/// token_j = x_j · W_j + b_j per cluster, CLS prepended at position 0;
/// batch rows stacked into (B·(C+1))×d.
fn tokenize(
    g: &mut Graph,
    bound: &BoundParams,
    prefix: &str,
    xs: &[Vec<f64>],
    cls: NodeId,
) -> NodeId {
    let w = bound.get(&format!("{prefix}.w"));
    let b = bound.get(&format!("{prefix}.b"));
    let blocks: Vec<NodeId> = xs
        .iter()
        .map(|x| {
            let scaled = g.row_scale(w, x);
            let tokens = g.add(scaled, b);
            g.concat_rows(&[cls, tokens])
        })
        .collect();
    g.concat_rows(&blocks)
}

/// Run the model over a batch. `primary[s]` is sample s's length-C feature
/// vector; `helper` is required exactly in cross-fusion mode.
pub fn forward(
    g: &mut Graph,
    bound: &BoundParams,
    config: &ModelConfig,
    primary: &[Vec<f64>],
    helper: Option<&[Vec<f64>]>,
) -> Result<ForwardOutput, ModelError> {
    if primary.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let c = config.cluster_count;
    check_stream(primary, c, "primary")?;
    match (config.fusion, helper) {
        (FusionMode::CrossFusion, None) => return Err(ModelError::MissingHelper),
        (FusionMode::SelfBaseline, Some(_)) => return Err(ModelError::UnexpectedHelper),
        (FusionMode::CrossFusion, Some(h)) => {
            if h.len() != primary.len() {
                return Err(ModelError::FeatureLength {
                    stream: "helper",
                    expected: primary.len(),
                    got: h.len(),
                });
            }
            check_stream(h, c, "helper")?;
        }
        (FusionMode::SelfBaseline, None) => {}
    }

    let batch = primary.len();
    let tokens = c + 1;
    let cls = bound.get("cls");
    let mut q = tokenize(g, bound, "tok.primary", primary, cls);
    let mut kv = helper.map(|h| tokenize(g, bound, "tok.helper", h, cls));

    let mut attention = Vec::new();
    for layer in 0..config.n_layers {
        let ids = LayerIds::collect(bound, layer);
        let source = match kv {
            None => KvSource::SelfSame,
            Some(node) => KvSource::Raw(node),
        };
        let q_next = encoder_layer(g, &ids, q, source, config, batch, &mut attention);
        if let (Some(node), true) = (kv, config.helper_evolves) {
            // The helper stream advances through the same layer,
            // self-attending; its attention maps are not recorded.
            let mut scratch = Vec::new();
            kv = Some(encoder_layer(
                g,
                &ids,
                node,
                KvSource::SelfSame,
                config,
                batch,
                &mut scratch,
            ));
        }
        q = q_next;
    }

    let readouts: Vec<NodeId> = (0..batch)
        .map(|s| {
            if config.mean_pool_readout {
                let block = g.slice_rows(q, s * tokens, tokens);
                let pool = g.constant(Tensor::row(vec![1.0 / tokens as f64; tokens]));
                g.matmul(pool, block)
            } else {
                g.slice_rows(q, s * tokens, 1)
            }
        })
        .collect();
    let stacked = g.concat_rows(&readouts);
    let normed = layer_norm_affine(g, stacked, bound.get("head.ln.g"), bound.get("head.ln.s"));
    let proj = g.matmul(normed, bound.get("head.w"));
    let predictions = g.add_bias(proj, bound.get("head.b"));
    Ok(ForwardOutput {
        predictions,
        attention,
    })
}

/// Eval-mode convenience: fresh graph, no dropout, plain prediction values.
pub fn predict(
    params: &ModelParams,
    primary: &[Vec<f64>],
    helper: Option<&[Vec<f64>]>,
) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new(false, 0);
    let bound = bind(&mut g, params);
    let out = forward(&mut g, &bound, &params.config, primary, helper)?;
    Ok(g.value(out.predictions).data().to_vec())
}
