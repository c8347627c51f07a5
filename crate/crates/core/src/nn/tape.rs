//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation evaluates eagerly and appends one node holding its output
//! tensor; `backward` walks the tape in reverse from a scalar loss and
//! accumulates gradients into the named parameters it reaches. Recording
//! order is the topological order, so a single reverse sweep suffices.

use crate::nn::params::ParamSet;
use crate::nn::tensor::{matmul, matmul_nt, matmul_tn, NnError, Tensor};
use rand::Rng;
use std::collections::BTreeMap;

/// Probabilities are clamped away from zero before any logarithm so a
/// saturated softmax cannot poison the loss with infinities.
const PROB_FLOOR: f64 = 1e-300;
/// Tighter clamp for Bernoulli probabilities, which sit in (0, 1).
const BERNOULLI_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: Option<String>,
    },
    MatMul(NodeRef, NodeRef),
    Add(NodeRef, NodeRef),
    Mul(NodeRef, NodeRef),
    AddBias(NodeRef, NodeRef),
    Scale(NodeRef, f64),
    Sigmoid(NodeRef),
    Tanh(NodeRef),
    Relu(NodeRef),
    SoftmaxRows(NodeRef),
    Sum(NodeRef),
    SliceCols {
        input: NodeRef,
        start: usize,
        end: usize,
    },
    ConcatRows(Vec<NodeRef>),
    Embedding {
        table: NodeRef,
        indices: Vec<u32>,
    },
    Conv1d {
        input: NodeRef,
        kernel: NodeRef,
        bias: NodeRef,
        width: usize,
    },
    GlobalMaxPool(NodeRef),
    Dropout {
        input: NodeRef,
        mask: Vec<f64>,
    },
    CategoricalCrossEntropy {
        probs: NodeRef,
        targets: Vec<u32>,
        weights: Vec<f64>,
    },
    BinaryCrossEntropy {
        probs: NodeRef,
        labels: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: NodeRef,
        targets: Vec<u32>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SigmoidBinaryCrossEntropy {
        logits: NodeRef,
        labels: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by parameter name, produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.by_param
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_param
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeRef {
        self.nodes.push(Node { op, value });
        NodeRef(self.nodes.len() - 1)
    }

    pub fn value(&self, node: NodeRef) -> &Tensor {
        &self.nodes[node.0].value
    }

    /// Records an input tensor that needs no gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeRef {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Records a named parameter; `backward` accumulates its gradient under
    /// this name. Registering the same parameter twice is allowed — the
    /// contributions add up.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeRef, NnError> {
        let value = params
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?
            .clone();
        Ok(self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            value,
        ))
    }

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, NnError> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let mut value = ta.clone();
        value.add_in_place(tb);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// `[r×c] + [c]`: adds the bias vector to every row.
    pub fn add_bias(&mut self, x: NodeRef, bias: NodeRef) -> Result<NodeRef, NnError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() != 2 || tb.shape().len() != 1 || tb.len() != tx.cols() {
            return Err(shape_err("add_bias", tx, tb));
        }
        let cols = tx.cols();
        let mut value = tx.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % cols];
        }
        Ok(self.push(Op::AddBias(x, bias), value))
    }

    pub fn scale(&mut self, x: NodeRef, factor: f64) -> NodeRef {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.value(x).shape(), data).expect("same shape");
        self.push(Op::Scale(x, factor), value)
    }

    pub fn sigmoid(&mut self, x: NodeRef) -> NodeRef {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(Op::Sigmoid(x), value)
    }

    pub fn tanh(&mut self, x: NodeRef) -> NodeRef {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(Op::Tanh(x), value)
    }

    pub fn relu(&mut self, x: NodeRef) -> NodeRef {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(Op::Relu(x), value)
    }

    /// Row-wise softmax of a matrix of logits.
    pub fn softmax_rows(&mut self, x: NodeRef) -> Result<NodeRef, NnError> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(shape_err("softmax", t, t));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_into(t.row_slice(r), &mut data[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.push(Op::SoftmaxRows(x), value))
    }

    pub fn sum(&mut self, x: NodeRef) -> NodeRef {
        let total: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: NodeRef, start: usize, end: usize) -> Result<NodeRef, NnError> {
        let t = self.value(x);
        if t.shape().len() != 2 || start >= end || end > t.cols() {
            return Err(NnError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                limit: t.cols(),
            });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(&[rows, width], data)?;
        Ok(self.push(
            Op::SliceCols {
                input: x,
                start,
                end,
            },
            value,
        ))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeRef]) -> Result<NodeRef, NnError> {
        let first = *parts.first().ok_or(NnError::IndexOutOfRange {
            op: "concat_rows",
            index: 0,
            limit: 0,
        })?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &part in parts {
            let t = self.value(part);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Looks rows of `table` up by index: the trainable embedding layer.
    pub fn embedding(&mut self, table: NodeRef, indices: &[u32]) -> Result<NodeRef, NnError> {
        let t = self.value(table);
        if t.shape().len() != 2 || indices.is_empty() {
            return Err(shape_err("embedding", t, t));
        }
        let (vocab, width) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * width);
        for &index in indices {
            if index as usize >= vocab {
                return Err(NnError::IndexOutOfRange {
                    op: "embedding",
                    index: index as usize,
                    limit: vocab,
                });
            }
            data.extend_from_slice(t.row_slice(index as usize));
        }
        let value = Tensor::new(&[indices.len(), width], data)?;
        Ok(self.push(
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            value,
        ))
    }

    /// Valid 1-D convolution over `[time × channels]` input with a kernel
    /// stored as `[width·channels × filters]` and one bias per filter;
    /// output is `[time − width + 1 × filters]`.
    pub fn conv1d(
        &mut self,
        input: NodeRef,
        kernel: NodeRef,
        bias: NodeRef,
        width: usize,
    ) -> Result<NodeRef, NnError> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        if ti.shape().len() != 2 || tk.shape().len() != 2 || width == 0 {
            return Err(shape_err("conv1d", ti, tk));
        }
        let (time, channels) = (ti.rows(), ti.cols());
        let filters = tk.cols();
        if tk.rows() != width * channels || time < width {
            return Err(shape_err("conv1d", ti, tk));
        }
        if tb.shape().len() != 1 || tb.len() != filters {
            return Err(shape_err("conv1d", tk, tb));
        }
        let out_time = time - width + 1;
        let mut data = vec![0.0; out_time * filters];
        for t in 0..out_time {
            let out_row = &mut data[t * filters..(t + 1) * filters];
            out_row.copy_from_slice(tb.data());
            for w in 0..width {
                let in_row = ti.row_slice(t + w);
                for (c, &x) in in_row.iter().enumerate() {
                    let k_row = tk.row_slice(w * channels + c);
                    for (o, &k) in out_row.iter_mut().zip(k_row) {
                        *o += x * k;
                    }
                }
            }
        }
        let value = Tensor::new(&[out_time, filters], data)?;
        Ok(self.push(
            Op::Conv1d {
                input,
                kernel,
                bias,
                width,
            },
            value,
        ))
    }

    /// Per-channel maximum over the time axis: `[T×C] → [1×C]`. Ties route
    /// the gradient to the earliest maximal position.
    pub fn global_max_pool1d(&mut self, input: NodeRef) -> Result<NodeRef, NnError> {
        let t = self.value(input);
        if t.shape().len() != 2 {
            return Err(shape_err("global_max_pool1d", t, t));
        }
        let (time, channels) = (t.rows(), t.cols());
        let mut data = t.row_slice(0).to_vec();
        for r in 1..time {
            for (best, &x) in data.iter_mut().zip(t.row_slice(r)) {
                if x > *best {
                    *best = x;
                }
            }
        }
        let value = Tensor::new(&[1, channels], data)?;
        Ok(self.push(Op::GlobalMaxPool(input), value))
    }

    /// Multiplies by a fresh Bernoulli mask scaled by `1/(1−p)` in training
    /// mode; in inference mode (or at `p = 0`) it is exactly the identity and
    /// records nothing.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeRef,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeRef, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::NonFinite(format!("dropout rate {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.push(Op::Dropout { input: x, mask }, value))
    }

    /// `−Σ_i weights[i] · ln probs[i, targets[i]]` over a row-stochastic
    /// matrix. Plain mean cross-entropy uses weights `1/n`; a policy-gradient
    /// step passes per-row advantages instead.
    pub fn categorical_cross_entropy(
        &mut self,
        probs: NodeRef,
        targets: &[u32],
        weights: &[f64],
    ) -> Result<NodeRef, NnError> {
        let t = self.value(probs);
        self.check_rowwise("categorical_cross_entropy", t, targets, weights)?;
        let mut loss = 0.0;
        for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            let p = t.at(i, y as usize).max(PROB_FLOOR);
            loss -= w * p.ln();
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::CategoricalCrossEntropy {
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            value,
        ))
    }

    /// Fused row-softmax + weighted cross-entropy on raw logits. Numerically
    /// safer than the two-op version when the network grows confident, and
    /// that is the path the training steps use.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeRef,
        targets: &[u32],
        weights: &[f64],
    ) -> Result<NodeRef, NnError> {
        let t = self.value(logits);
        self.check_rowwise("softmax_cross_entropy", t, targets, weights)?;
        let (rows, cols) = (t.rows(), t.cols());
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            let row = t.row_slice(i);
            let out = &mut probs[i * cols..(i + 1) * cols];
            let log_norm = softmax_into(row, out);
            loss -= w * (row[y as usize] - log_norm);
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            value,
        ))
    }

    fn check_rowwise(
        &self,
        op: &'static str,
        t: &Tensor,
        targets: &[u32],
        weights: &[f64],
    ) -> Result<(), NnError> {
        if t.shape().len() != 2 || targets.len() != t.rows() || weights.len() != t.rows() {
            return Err(NnError::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y as usize >= t.cols()) {
            return Err(NnError::IndexOutOfRange {
                op,
                index: bad as usize,
                limit: t.cols(),
            });
        }
        Ok(())
    }

    /// Mean Bernoulli cross-entropy of probabilities against labels.
    pub fn binary_cross_entropy(
        &mut self,
        probs: NodeRef,
        labels: &[f64],
    ) -> Result<NodeRef, NnError> {
        let t = self.value(probs);
        if t.len() != labels.len() {
            return Err(NnError::ShapeMismatch {
                op: "binary_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let mut loss = 0.0;
        for (&p, &l) in t.data().iter().zip(labels) {
            let p = p.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
            loss -= (l * p.ln() + (1.0 - l) * (1.0 - p).ln()) / n;
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::BinaryCrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    /// Fused sigmoid + mean Bernoulli cross-entropy on raw logits, the
    /// numerically stable discriminator loss.
    pub fn sigmoid_binary_cross_entropy(
        &mut self,
        logits: NodeRef,
        labels: &[f64],
    ) -> Result<NodeRef, NnError> {
        let t = self.value(logits);
        if t.len() != labels.len() {
            return Err(NnError::ShapeMismatch {
                op: "sigmoid_binary_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let mut loss = 0.0;
        for (&x, &l) in t.data().iter().zip(labels) {
            // max(x,0) − x·l + ln(1 + exp(−|x|)), stable for both signs.
            loss += (x.max(0.0) - x * l + (-x.abs()).exp().ln_1p()) / n;
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::SigmoidBinaryCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
        ))
    }

    /// Reverse sweep from a scalar loss; returns gradients for every named
    /// parameter the loss reaches (others simply stay absent and read as
    /// zero downstream).
    pub fn backward(&self, loss: NodeRef) -> Result<Gradients, NnError> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(NnError::NotScalar {
                op: "backward",
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar(1.0));
        let mut by_param: BTreeMap<String, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(grad) = slots[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        match by_param.get_mut(name) {
                            Some(total) => total.add_in_place(&grad),
                            None => {
                                by_param.insert(name.clone(), grad);
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&grad, &self.nodes[b.0].value)?;
                    let db = matmul_tn(&self.nodes[a.0].value, &grad)?;
                    accumulate(&mut slots[a.0], da);
                    accumulate(&mut slots[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut slots[a.0], grad.clone());
                    accumulate(&mut slots[b.0], grad);
                }
                Op::Mul(a, b) => {
                    let da = elementwise(&grad, &self.nodes[b.0].value, |g, v| g * v);
                    let db = elementwise(&grad, &self.nodes[a.0].value, |g, v| g * v);
                    accumulate(&mut slots[a.0], da);
                    accumulate(&mut slots[b.0], db);
                }
                Op::AddBias(x, bias) => {
                    let cols = grad.cols();
                    let mut db = Tensor::zeros(&[cols]);
                    for (i, &g) in grad.data().iter().enumerate() {
                        db.data[i % cols] += g;
                    }
                    accumulate(&mut slots[x.0], grad);
                    accumulate(&mut slots[bias.0], db);
                }
                Op::Scale(x, factor) => {
                    let data = grad.data().iter().map(|g| g * factor).collect();
                    accumulate(&mut slots[x.0], Tensor::new(grad.shape(), data)?);
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[idx].value;
                    let dx = elementwise(&grad, y, |g, y| g * y * (1.0 - y));
                    accumulate(&mut slots[x.0], dx);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[idx].value;
                    let dx = elementwise(&grad, y, |g, y| g * (1.0 - y * y));
                    accumulate(&mut slots[x.0], dx);
                }
                Op::Relu(x) => {
                    let input = &self.nodes[x.0].value;
                    let dx = elementwise(&grad, input, |g, v| if v > 0.0 { g } else { 0.0 });
                    accumulate(&mut slots[x.0], dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(y.shape());
                    for r in 0..rows {
                        let yr = y.row_slice(r);
                        let gr = grad.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        let out = &mut dx.data[r * cols..(r + 1) * cols];
                        for ((o, &y), &g) in out.iter_mut().zip(yr).zip(gr) {
                            *o = y * (g - dot);
                        }
                    }
                    accumulate(&mut slots[x.0], dx);
                }
                Op::Sum(x) => {
                    let g = grad.scalar_value();
                    let shape = self.nodes[x.0].value.shape();
                    accumulate(&mut slots[x.0], Tensor::filled(shape, g));
                }
                Op::SliceCols { input, start, end } => {
                    let src = &self.nodes[input.0].value;
                    let (rows, cols) = (src.rows(), src.cols());
                    let width = end - start;
                    let mut dx = Tensor::zeros(src.shape());
                    for r in 0..rows {
                        let g_row = grad.row_slice(r);
                        dx.data[r * cols + start..r * cols + end].copy_from_slice(&g_row[..width]);
                    }
                    accumulate(&mut slots[input.0], dx);
                }
                Op::ConcatRows(parts) => {
                    let cols = grad.cols();
                    let mut offset = 0;
                    for &part in parts {
                        let rows = self.nodes[part.0].value.rows();
                        let block = grad.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut slots[part.0], Tensor::new(&[rows, cols], block)?);
                        offset += rows;
                    }
                }
                Op::Embedding { table, indices } => {
                    let shape = self.nodes[table.0].value.shape().to_vec();
                    let width = shape[1];
                    let mut dt = Tensor::zeros(&shape);
                    for (i, &index) in indices.iter().enumerate() {
                        let g_row = grad.row_slice(i);
                        let dst =
                            &mut dt.data[index as usize * width..(index as usize + 1) * width];
                        for (d, &g) in dst.iter_mut().zip(g_row) {
                            *d += g;
                        }
                    }
                    accumulate(&mut slots[table.0], dt);
                }
                Op::Conv1d {
                    input,
                    kernel,
                    bias,
                    width,
                } => {
                    let ti = &self.nodes[input.0].value;
                    let tk = &self.nodes[kernel.0].value;
                    let (_, channels) = (ti.rows(), ti.cols());
                    let filters = tk.cols();
                    let out_time = grad.rows();
                    let mut d_in = Tensor::zeros(ti.shape());
                    let mut d_kernel = Tensor::zeros(tk.shape());
                    let mut d_bias = Tensor::zeros(&[filters]);
                    for t in 0..out_time {
                        let g_row = grad.row_slice(t);
                        for (d, &g) in d_bias.data.iter_mut().zip(g_row) {
                            *d += g;
                        }
                        for w in 0..*width {
                            let in_row = ti.row_slice(t + w);
                            for c in 0..channels {
                                let k_row = tk.row_slice(w * channels + c);
                                let mut acc = 0.0;
                                for (&g, &k) in g_row.iter().zip(k_row) {
                                    acc += g * k;
                                }
                                d_in.data[(t + w) * channels + c] += acc;
                                let x = in_row[c];
                                let dk =
                                    &mut d_kernel.data[(w * channels + c) * filters..][..filters];
                                for (d, &g) in dk.iter_mut().zip(g_row) {
                                    *d += x * g;
                                }
                            }
                        }
                    }
                    accumulate(&mut slots[input.0], d_in);
                    accumulate(&mut slots[kernel.0], d_kernel);
                    accumulate(&mut slots[bias.0], d_bias);
                }
                Op::GlobalMaxPool(input) => {
                    let src = &self.nodes[input.0].value;
                    let (time, channels) = (src.rows(), src.cols());
                    let mut dx = Tensor::zeros(src.shape());
                    for c in 0..channels {
                        let mut best_row = 0;
                        let mut best = src.at(0, c);
                        for r in 1..time {
                            let x = src.at(r, c);
                            if x > best {
                                best = x;
                                best_row = r;
                            }
                        }
                        dx.data[best_row * channels + c] = grad.data()[c];
                    }
                    accumulate(&mut slots[input.0], dx);
                }
                Op::Dropout { input, mask } => {
                    let data = grad.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut slots[input.0], Tensor::new(grad.shape(), data)?);
                }
                Op::CategoricalCrossEntropy {
                    probs,
                    targets,
                    weights,
                } => {
                    let g = grad.scalar_value();
                    let tp = &self.nodes[probs.0].value;
                    let cols = tp.cols();
                    let mut dp = Tensor::zeros(tp.shape());
                    for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        let p = tp.at(i, y as usize).max(PROB_FLOOR);
                        dp.data[i * cols + y as usize] = -g * w / p;
                    }
                    accumulate(&mut slots[probs.0], dp);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let g = grad.scalar_value();
                    let shape = self.nodes[logits.0].value.shape().to_vec();
                    let cols = shape[1];
                    let mut dx = Tensor::zeros(&shape);
                    for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        let p_row = &probs[i * cols..(i + 1) * cols];
                        let out = &mut dx.data[i * cols..(i + 1) * cols];
                        for (o, &p) in out.iter_mut().zip(p_row) {
                            *o = g * w * p;
                        }
                        out[y as usize] -= g * w;
                    }
                    accumulate(&mut slots[logits.0], dx);
                }
                Op::BinaryCrossEntropy { probs, labels } => {
                    let g = grad.scalar_value();
                    let tp = &self.nodes[probs.0].value;
                    let n = labels.len() as f64;
                    let data = tp
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &l)| {
                            let p = p.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
                            g * (p - l) / (p * (1.0 - p) * n)
                        })
                        .collect();
                    accumulate(&mut slots[probs.0], Tensor::new(tp.shape(), data)?);
                }
                Op::SigmoidBinaryCrossEntropy { logits, labels } => {
                    let g = grad.scalar_value();
                    let tx = &self.nodes[logits.0].value;
                    let n = labels.len() as f64;
                    let data = tx
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&x, &l)| g * (sigmoid(x) - l) / n)
                        .collect();
                    accumulate(&mut slots[logits.0], Tensor::new(tx.shape(), data)?);
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Writes softmax of `row` into `out` and returns the log-normalizer
/// `max + ln Σ exp(x − max)`.
fn softmax_into(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(total) => total.add_in_place(&delta),
        None => *slot = Some(delta),
    }
}

/// One step of a standard 4-gate LSTM cell. `x` is `[batch × input]`,
/// `h_prev`/`c_prev` are `[batch × hidden]`, `wx` is `[input × 4·hidden]`,
/// `wh` is `[hidden × 4·hidden]`, `bias` is `[4·hidden]`; the gate order in
/// the packed dimension is input, forget, candidate, output. Returns the new
/// hidden and cell states.
pub fn lstm_cell(
    tape: &mut Tape,
    x: NodeRef,
    h_prev: NodeRef,
    c_prev: NodeRef,
    wx: NodeRef,
    wh: NodeRef,
    bias: NodeRef,
) -> Result<(NodeRef, NodeRef), NnError> {
    let zx = tape.matmul(x, wx)?;
    let zh = tape.matmul(h_prev, wh)?;
    let z_sum = tape.add(zx, zh)?;
    let z = tape.add_bias(z_sum, bias)?;
    let packed = tape.value(z).cols();
    if packed % 4 != 0 || tape.value(h_prev).cols() != packed / 4 {
        return Err(NnError::ShapeMismatch {
            op: "lstm_cell",
            lhs: tape.value(h_prev).shape().to_vec(),
            rhs: tape.value(z).shape().to_vec(),
        });
    }
    let hidden = packed / 4;
    let i_pre = tape.slice_cols(z, 0, hidden)?;
    let i = tape.sigmoid(i_pre);
    let f_pre = tape.slice_cols(z, hidden, 2 * hidden)?;
    let f = tape.sigmoid(f_pre);
    let g_pre = tape.slice_cols(z, 2 * hidden, 3 * hidden)?;
    let g = tape.tanh(g_pre);
    let o_pre = tape.slice_cols(z, 3 * hidden, 4 * hidden)?;
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, c_new))
}

/// Fully connected layer: `x·w + b`.
pub fn dense(tape: &mut Tape, x: NodeRef, w: NodeRef, b: NodeRef) -> Result<NodeRef, NnError> {
    let z = tape.matmul(x, w)?;
    tape.add_bias(z, b)
}
