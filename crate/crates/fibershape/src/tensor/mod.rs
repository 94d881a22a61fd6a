//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each builder method computes
//! the result immediately, pushes a node, and returns a [`NodeId`] handle.
//! [`Graph::backward`] then walks the tape once in reverse insertion order,
//! accumulating gradients into every node that (transitively) depends on a
//! parameter leaf. A graph is single-use: build, backward, read gradients,
//! drop.
//!
//! Shape rules are programmer contracts, so mismatched operands panic with
//! the offending shapes; runtime contract violations (non-scalar loss,
//! repeated backward) are `Result`s.
//!
//! Everything is double precision. Matrix products go through `matrixmultiply`;
//! all other kernels are simple loops.

pub mod adam;
pub mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Row-major matrix of `f64`. Scalars are 1×1, row vectors 1×n.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} != {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row(v: Vec<f64>) -> Self {
        let cols = v.len();
        Self::from_vec(1, cols, v)
    }

    pub fn col(v: Vec<f64>) -> Self {
        let rows = v.len();
        Self::from_vec(rows, 1, v)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), [1, 1], "item() needs a scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c += alpha * op(a) · op(b)` with arbitrary input strides (`beta` scales
/// the existing `c` first). Output is always row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    /// A·Bᵀ without materializing the transpose.
    MatmulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    /// Matrix + row vector broadcast over rows.
    AddBias(usize, usize),
    Scale(usize, f64),
    /// Row r multiplied by the constant `coeffs[r]`.
    RowScale(usize, Vec<f64>),
    /// Column j multiplied by entry j of a trainable 1×c vector.
    ColScale(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    SoftmaxRows(usize),
    /// Caches 1/sqrt(var+eps) per row for the backward pass.
    LayerNormRows(usize, Vec<f64>),
    Relu(usize),
    Reglu(usize),
    /// Mask entries are 0 or 1/(1−p), applied multiplicatively.
    Dropout(usize, Vec<f64>),
    MseLoss(usize, usize),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("gradient for parameter {name:?} is non-finite")]
    NonFiniteGradient { name: String },
    #[error("parameter {name:?} has no gradient (not on the loss path)")]
    MissingGradient { name: String },
}

const LAYER_NORM_EPS: f64 = 1e-12;

/// Operation tape. `train` gates dropout; the internal RNG drives dropout
/// masks only, so two graphs with equal seeds replay identical masks.
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl Graph {
    pub fn new(train: bool, dropout_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            backward_done: false,
        }
    }

    pub fn train_mode(&self) -> bool {
        self.train
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. this node, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    /// Trainable input: receives a gradient from backward.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            ta.cols, tb.rows,
            "matmul {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = Tensor::zeros(m, n);
        gemm(
            m, k, n, 1.0,
            &ta.data, k as isize, 1,
            &tb.data, n as isize, 1,
            0.0, &mut out.data,
        );
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, ng, Op::Matmul(a.0, b.0))
    }

    /// A·Bᵀ for A m×k, B n×k.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            ta.cols, tb.cols,
            "matmul_nt {:?} x {:?}ᵀ",
            ta.shape(),
            tb.shape()
        );
        let (m, k, n) = (ta.rows, ta.cols, tb.rows);
        let mut out = Tensor::zeros(m, n);
        gemm(
            m, k, n, 1.0,
            &ta.data, k as isize, 1,
            &tb.data, 1, k as isize,
            0.0, &mut out.data,
        );
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, ng, Op::MatmulNt(a.0, b.0))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(ta.cols, ta.rows);
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                out.data[c * ta.rows + r] = ta.data[r * ta.cols + c];
            }
        }
        let ng = self.needs(a.0);
        self.push(out, ng, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, ng, Op::Add(a.0, b.0))
    }

    /// Add a 1×c bias row to every row of an r×c matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(tb.rows, 1, "bias must be a row vector");
        assert_eq!(ta.cols, tb.cols, "add_bias {:?} + {:?}", ta.shape(), tb.shape());
        let mut out = ta.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += tb.data[c];
            }
        }
        let ng = self.needs(a.0) || self.needs(bias.0);
        self.push(out, ng, Op::AddBias(a.0, bias.0))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x * k).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.needs(a.0);
        self.push(out, ng, Op::Scale(a.0, k))
    }

    /// Multiply row r by the constant `coeffs[r]` (not differentiated w.r.t.
    /// the coefficients).
    pub fn row_scale(&mut self, a: NodeId, coeffs: &[f64]) -> NodeId {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.rows, coeffs.len(), "row_scale coefficient count");
        let mut out = ta.clone();
        for (r, &k) in coeffs.iter().enumerate() {
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= k;
            }
        }
        let ng = self.needs(a.0);
        self.push(out, ng, Op::RowScale(a.0, coeffs.to_vec()))
    }

    /// Multiply column j by entry j of a (typically trainable) 1×c vector.
    pub fn col_scale(&mut self, a: NodeId, gain: NodeId) -> NodeId {
        let (ta, tg) = (&self.nodes[a.0].value, &self.nodes[gain.0].value);
        assert_eq!(tg.rows, 1, "gain must be a row vector");
        assert_eq!(ta.cols, tg.cols, "col_scale {:?} x {:?}", ta.shape(), tg.shape());
        let mut out = ta.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] *= tg.data[c];
            }
        }
        let ng = self.needs(a.0) || self.needs(gain.0);
        self.push(out, ng, Op::ColScale(a.0, gain.0))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.nodes[parts[0].0].value.cols;
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        self.push(
            Tensor::from_vec(rows, cols, data),
            ng,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols]
                    .copy_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
            }
            offset += t.cols;
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        self.push(out, ng, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = &self.nodes[a.0].value;
        assert!(start + len <= ta.rows, "slice_rows out of range");
        let data = ta.data[start * ta.cols..(start + len) * ta.cols].to_vec();
        let out = Tensor::from_vec(len, ta.cols, data);
        let ng = self.needs(a.0);
        self.push(out, ng, Op::SliceRows(a.0, start))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = &self.nodes[a.0].value;
        assert!(start + len <= ta.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(ta.rows, len);
        for r in 0..ta.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&ta.data[r * ta.cols + start..r * ta.cols + start + len]);
        }
        let ng = self.needs(a.0);
        self.push(out, ng, Op::SliceCols(a.0, start))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let mut out = ta.clone();
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(a.0);
        self.push(out, ng, Op::SoftmaxRows(a.0))
    }

    /// Normalize each row to mean 0, variance 1 (ε = 1e-12, no affine part —
    /// compose with [`Graph::col_scale`] and [`Graph::add_bias`] for
    /// gain/shift).
    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let mut out = ta.clone();
        let mut rstds = Vec::with_capacity(out.rows);
        let c = out.cols as f64;
        for r in 0..out.rows {
            let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let ng = self.needs(a.0);
        self.push(out, ng, Op::LayerNormRows(a.0, rstds))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.needs(a.0);
        self.push(out, ng, Op::Relu(a.0))
    }

    /// Split the columns in half into (a, b) and return a ⊙ relu(b).
    pub fn reglu(&mut self, x: NodeId) -> NodeId {
        let tx = &self.nodes[x.0].value;
        assert!(tx.cols % 2 == 0, "reglu needs an even column count, got {}", tx.cols);
        let half = tx.cols / 2;
        let mut out = Tensor::zeros(tx.rows, half);
        for r in 0..tx.rows {
            for c in 0..half {
                let a = tx.data[r * tx.cols + c];
                let b = tx.data[r * tx.cols + half + c];
                out.data[r * half + c] = a * b.max(0.0);
            }
        }
        let ng = self.needs(x.0);
        self.push(out, ng, Op::Reglu(x.0))
    }

    /// Zero each entry with probability p and scale survivors by 1/(1−p).
    /// Identity in eval mode or at p = 0 (no node is recorded).
    pub fn dropout(&mut self, a: NodeId, p: f64) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1), got {p}");
        if !self.train || p == 0.0 {
            return a;
        }
        let keep_scale = 1.0 / (1.0 - p);
        let ta_shape = self.nodes[a.0].value.shape();
        let mask: Vec<f64> = (0..ta_shape[0] * ta_shape[1])
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        let ng = self.needs(a.0);
        self.push(out, ng, Op::Dropout(a.0, mask))
    }

    /// Mean squared error over all entries; returns a 1×1 scalar.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let (tp, tt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        assert_eq!(tp.shape(), tt.shape(), "mse_loss shape mismatch");
        let n = tp.len() as f64;
        let sum: f64 = tp
            .data
            .iter()
            .zip(&tt.data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let ng = self.needs(pred.0) || self.needs(target.0);
        self.push(Tensor::scalar(sum / n), ng, Op::MseLoss(pred.0, target.0))
    }

    /// Reverse-accumulate d(loss)/d(node) into every node on the path from
    /// parameters to `loss`. Seeds d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lt = &self.nodes[loss.0].value;
        if lt.shape() != [1, 1] {
            return Err(TensorError::NonScalarLoss {
                rows: lt.rows,
                cols: lt.cols,
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            // Take the node's gradient out so we can mutate parents freely.
            let g = self.nodes[i].grad.take().unwrap();
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: usize, update: impl FnOnce(&mut Tensor, &Tensor)) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let shape = self.nodes[id].value.shape();
        let mut g = self
            .nodes[id]
            .grad
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]));
        // Reborrow value immutably alongside the detached gradient.
        let value = &self.nodes[id].value;
        update(&mut g, value);
        self.nodes[id].grad = Some(g);
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        // Clones of parent values needed while mutating parent grads are
        // taken cheaply via split indices — instead read through raw copies
        // where required.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (av, bv) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                self.accum(a, |ga, _| {
                    gemm(m, n, k, 1.0, &g.data, n as isize, 1, &bv.data, 1, n as isize, 1.0, &mut ga.data);
                });
                self.accum(b, |gb, _| {
                    gemm(k, m, n, 1.0, &av.data, 1, k as isize, &g.data, n as isize, 1, 1.0, &mut gb.data);
                });
            }
            &Op::MatmulNt(a, b) => {
                let (av, bv) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                let (m, k, n) = (av.rows, av.cols, bv.rows);
                self.accum(a, |ga, _| {
                    gemm(m, n, k, 1.0, &g.data, n as isize, 1, &bv.data, k as isize, 1, 1.0, &mut ga.data);
                });
                self.accum(b, |gb, _| {
                    gemm(n, m, k, 1.0, &g.data, 1, n as isize, &av.data, k as isize, 1, 1.0, &mut gb.data);
                });
            }
            &Op::Transpose(a) => {
                let (rows, cols) = (g.rows, g.cols);
                self.accum(a, |ga, _| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga.data[c * rows + r] += g.data[r * cols + c];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accum(a, |ga, _| {
                    for (x, y) in ga.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
                self.accum(b, |gb, _| {
                    for (x, y) in gb.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
            }
            &Op::AddBias(a, bias) => {
                self.accum(a, |ga, _| {
                    for (x, y) in ga.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                });
                let (rows, cols) = (g.rows, g.cols);
                self.accum(bias, |gb, _| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb.data[c] += g.data[r * cols + c];
                        }
                    }
                });
            }
            &Op::Scale(a, k) => {
                self.accum(a, |ga, _| {
                    for (x, y) in ga.data.iter_mut().zip(&g.data) {
                        *x += k * y;
                    }
                });
            }
            Op::RowScale(a, coeffs) => {
                let (a, coeffs) = (*a, coeffs.clone());
                let cols = g.cols;
                self.accum(a, |ga, _| {
                    for (r, &k) in coeffs.iter().enumerate() {
                        for c in 0..cols {
                            ga.data[r * cols + c] += k * g.data[r * cols + c];
                        }
                    }
                });
            }
            &Op::ColScale(a, gain) => {
                let gv = self.nodes[gain].value.clone();
                let av = self.nodes[a].value.clone();
                let (rows, cols) = (g.rows, g.cols);
                self.accum(a, |ga, _| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga.data[r * cols + c] += g.data[r * cols + c] * gv.data[c];
                        }
                    }
                });
                self.accum(gain, |gg, _| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data[c] += g.data[r * cols + c] * av.data[r * cols + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let cols = g.cols;
                let mut row = 0;
                for p in parts {
                    let prows = self.nodes[p].value.rows;
                    let start = row * cols;
                    self.accum(p, |gp, _| {
                        for (x, y) in gp.data.iter_mut().zip(&g.data[start..start + prows * cols]) {
                            *x += y;
                        }
                    });
                    row += prows;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let (rows, cols) = (g.rows, g.cols);
                let mut offset = 0;
                for p in parts {
                    let pcols = self.nodes[p].value.cols;
                    let off = offset;
                    self.accum(p, |gp, _| {
                        for r in 0..rows {
                            for c in 0..pcols {
                                gp.data[r * pcols + c] += g.data[r * cols + off + c];
                            }
                        }
                    });
                    offset += pcols;
                }
            }
            &Op::SliceRows(a, start) => {
                let (rows, cols) = (g.rows, g.cols);
                self.accum(a, |ga, _| {
                    for (x, y) in ga.data[start * cols..(start + rows) * cols]
                        .iter_mut()
                        .zip(&g.data)
                    {
                        *x += y;
                    }
                });
            }
            &Op::SliceCols(a, start) => {
                let (rows, cols) = (g.rows, g.cols);
                self.accum(a, |ga, _| {
                    let acols = ga.cols;
                    for r in 0..rows {
                        for c in 0..cols {
                            ga.data[r * acols + start + c] += g.data[r * cols + c];
                        }
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.clone();
                let (rows, cols) = (y.rows, y.cols);
                self.accum(a, |ga, _| {
                    for r in 0..rows {
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            ga.data[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows(a, rstds) => {
                let (a, rstds) = (*a, rstds.clone());
                let y = self.nodes[i].value.clone();
                let (rows, cols) = (y.rows, y.cols);
                let cf = cols as f64;
                self.accum(a, |ga, _| {
                    for r in 0..rows {
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let gmean: f64 = gr.iter().sum::<f64>() / cf;
                        let gymean: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / cf;
                        for c in 0..cols {
                            ga.data[r * cols + c] += rstds[r] * (gr[c] - gmean - yr[c] * gymean);
                        }
                    }
                });
            }
            &Op::Relu(a) => {
                let x = self.nodes[a].value.clone();
                self.accum(a, |ga, _| {
                    for (gx, (gy, xv)) in ga.data.iter_mut().zip(g.data.iter().zip(&x.data)) {
                        if *xv > 0.0 {
                            *gx += gy;
                        }
                    }
                });
            }
            &Op::Reglu(x) => {
                let xv = self.nodes[x].value.clone();
                let (rows, half) = (g.rows, g.cols);
                let xcols = xv.cols;
                self.accum(x, |gx, _| {
                    for r in 0..rows {
                        for c in 0..half {
                            let a = xv.data[r * xcols + c];
                            let b = xv.data[r * xcols + half + c];
                            let gy = g.data[r * half + c];
                            gx.data[r * xcols + c] += gy * b.max(0.0);
                            if b > 0.0 {
                                gx.data[r * xcols + half + c] += gy * a;
                            }
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => {
                let (a, mask) = (*a, mask.clone());
                self.accum(a, |ga, _| {
                    for ((x, y), m) in ga.data.iter_mut().zip(&g.data).zip(&mask) {
                        *x += y * m;
                    }
                });
            }
            &Op::MseLoss(pred, target) => {
                let (pv, tv) = (
                    self.nodes[pred].value.clone(),
                    self.nodes[target].value.clone(),
                );
                let n = pv.len() as f64;
                let g0 = g.data[0];
                self.accum(pred, |gp, _| {
                    for (gx, (p, t)) in gp.data.iter_mut().zip(pv.data.iter().zip(&tv.data)) {
                        *gx += g0 * 2.0 * (p - t) / n;
                    }
                });
                self.accum(target, |gt, _| {
                    for (gx, (p, t)) in gt.data.iter_mut().zip(pv.data.iter().zip(&tv.data)) {
                        *gx -= g0 * 2.0 * (p - t) / n;
                    }
                });
            }
        }
    }
}
