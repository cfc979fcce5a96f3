use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Param, Tensor};

/// Handle to a node of a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const GELU_COEFF: f64 = 0.044715;

enum Op {
    Constant,
    Leaf(Param),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow { matrix: NodeId, row: NodeId },
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Sum(NodeId),
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

impl Node {
    fn rows(&self) -> usize {
        self.shape[0]
    }
    fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            self.shape[0]
        }
    }
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// topological order is inherent: every operation's inputs precede it.
/// Replaying backward rules in reverse populates gradients for every
/// `requires_grad` leaf reachable from the loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let inner = c * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = c * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable per-element BCE with logits:
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
fn bce_scalar(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name.into() });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
            op,
        });
        Ok(id)
    }

    fn require_matrix(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let n = self.node(id);
        if n.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: n.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((n.shape[0], n.shape[1]))
    }

    // ── node constructors ────────────────────────────────────────────

    /// Non-differentiable input value.
    pub fn constant(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push("constant", t.shape().to_vec(), t.data().to_vec(), false, Op::Constant)
    }

    /// Leaf bound to a shared parameter. If the parameter requires grad,
    /// `backward` accumulates into it.
    pub fn leaf(&mut self, p: &Param) -> Result<NodeId> {
        let (shape, data, needs_grad) = {
            let t = p.borrow();
            (t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
        };
        self.push("leaf", shape, data, needs_grad, Op::Leaf(p.clone()))
    }

    // ── operations ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push("matmul", vec![m, n], data, needs, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.require_matrix("transpose", a)?;
        let data = transpose_raw(&self.node(a).data, m, n);
        let needs = self.node(a).needs_grad;
        self.push("transpose", vec![n, m], data, needs, Op::Transpose(a))
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape {
                op: "add",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push("add", self.node(a).shape.clone(), data, needs, Op::Add(a, b))
    }

    /// Adds a length-n vector to every row of an m-by-n matrix.
    pub fn add_row(&mut self, matrix: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.require_matrix("add_row", matrix)?;
        let r = self.node(row);
        if r.shape.len() != 1 || r.shape[0] != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.node(matrix).shape.clone(),
                rhs: r.shape.clone(),
            });
        }
        let row_data = self.node(row).data.clone();
        let mut data = self.node(matrix).data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += row_data[j];
            }
        }
        let needs = self.node(matrix).needs_grad || self.node(row).needs_grad;
        self.push("add_row", vec![m, n], data, needs, Op::AddRow { matrix, row })
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape {
                op: "mul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        self.push("mul", self.node(a).shape.clone(), data, needs, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.node(a).data.iter().map(|x| c * x).collect();
        let needs = self.node(a).needs_grad;
        self.push("scale", self.node(a).shape.clone(), data, needs, Op::Scale(a, c))
    }

    /// Elementwise tanh-approximation GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.node(a).data.iter().map(|&x| gelu_scalar(x)).collect();
        let needs = self.node(a).needs_grad;
        self.push("gelu", self.node(a).shape.clone(), data, needs, Op::Gelu(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.require_matrix("softmax_rows", a)?;
        let src = &self.node(a).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let needs = self.node(a).needs_grad;
        self.push("softmax_rows", vec![m, n], data, needs, Op::SoftmaxRows(a))
    }

    /// Per-row standardization followed by an affine map with vector gain
    /// and bias. Uses the population variance.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (m, n) = self.require_matrix("layer_norm", x)?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let t = self.node(v);
            if t.shape.len() != 1 || t.shape[0] != n {
                return Err(Error::Shape {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: vec![n],
                    rhs: t.shape.clone(),
                });
            }
        }
        let src = &self.node(x).data;
        let g = &self.node(gain).data;
        let b = &self.node(bias).data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs =
            self.node(x).needs_grad || self.node(gain).needs_grad || self.node(bias).needs_grad;
        self.push("layer_norm", vec![m, n], data, needs, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Full reduction to a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.node(a).data.iter().sum();
        let needs = self.node(a).needs_grad;
        self.push("sum", vec![1], vec![total], needs, Op::Sum(a))
    }

    /// Mean over all entries of the per-element binary cross entropy
    /// between logits and {0,1} targets, in the stable log-sum form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        if self.node(logits).shape != targets.shape() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: self.node(logits).shape.clone(),
                rhs: targets.shape().to_vec(),
            });
        }
        if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Contract(format!(
                "bce_with_logits targets must be exactly 0 or 1, got {bad}"
            )));
        }
        let z = &self.node(logits).data;
        let y = targets.data();
        let numel = z.len() as f64;
        let loss = z.iter().zip(y).map(|(&z, &y)| bce_scalar(z, y)).sum::<f64>() / numel;
        let needs = self.node(logits).needs_grad;
        self.push(
            "bce_with_logits",
            vec![1],
            vec![loss],
            needs,
            Op::BceWithLogits { logits, targets: y.to_vec() },
        )
    }

    /// Contiguous row slice `[start, start+len)` of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.require_matrix("slice_rows", x)?;
        if start + len > m || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of bounds for {m} rows",
                start + len
            )));
        }
        let data = self.node(x).data[start * n..(start + len) * n].to_vec();
        let needs = self.node(x).needs_grad;
        self.push("slice_rows", vec![len, n], data, needs, Op::SliceRows { x, start })
    }

    /// Contiguous column slice `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.require_matrix("slice_cols", x)?;
        if start + len > n || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of bounds for {n} cols",
                start + len
            )));
        }
        let src = &self.node(x).data;
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let needs = self.node(x).needs_grad;
        self.push("slice_cols", vec![m, len], data, needs, Op::SliceCols { x, start })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, n) = self.require_matrix("concat_rows", parts[0])?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for &p in parts {
            let (m_p, n_p) = self.require_matrix("concat_rows", p)?;
            if n_p != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, n],
                    rhs: self.node(p).shape.clone(),
                });
            }
            rows += m_p;
            needs |= self.node(p).needs_grad;
            data.extend_from_slice(&self.node(p).data);
        }
        self.push("concat_rows", vec![rows, n], data, needs, Op::ConcatRows(parts.to_vec()))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (m, _) = self.require_matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut needs = false;
        for &p in parts {
            let (m_p, n_p) = self.require_matrix("concat_cols", p)?;
            if m_p != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            widths.push(n_p);
            total += n_p;
            needs |= self.node(p).needs_grad;
        }
        let mut data = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.node(p).data[i * w..(i + 1) * w];
                data[i * total + off..i * total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        self.push("concat_cols", vec![m, total], data, needs, Op::ConcatCols(parts.to_vec()))
    }

    // ── accessors ────────────────────────────────────────────────────

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    /// Copies a node's value out as a plain tensor.
    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor::new(self.node(id).data.clone(), self.node(id).shape.clone())
            .expect("graph node values are always valid tensors")
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let n = self.node(id);
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar node, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Replays backward rules in reverse tape order, accumulating into the
    /// grad buffers of every `requires_grad` leaf parameter reachable from
    /// `loss`. Repeated calls accumulate; callers reset grads explicitly.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("backward: loss node not in this graph".into()));
        }
        if self.node(loss).data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.node(loss).needs_grad {
            // No trainable leaf reaches the loss; all gradients are zero.
            return Ok(());
        }

        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| if n.needs_grad { vec![0.0; n.data.len()] } else { Vec::new() })
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || grads[i].is_empty() {
                continue;
            }
            let grad = std::mem::take(&mut grads[i]);
            self.apply_backward_rule(i, &grad, &mut grads)?;
            // Leaves keep their gradient for the write-back below.
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                grads[i] = grad;
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(param) = &node.op {
                if node.needs_grad && !grads[i].is_empty() {
                    param.borrow_mut().accumulate_grad(&grads[i])?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Vec<f64>], target: NodeId, delta: &[f64]) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        for (g, d) in grads[target.0].iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn apply_backward_rule(&self, i: usize, grad: &[f64], grads: &mut [Vec<f64>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Leaf(_) => {}

            Op::Matmul(a, b) => {
                let (m, k) = (self.node(*a).rows(), self.node(*a).cols());
                let n = self.node(*b).cols();
                if self.node(*a).needs_grad {
                    // dA = g . B^T
                    let bt = transpose_raw(&self.node(*b).data, k, n);
                    let da = matmul_raw(grad, &bt, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.node(*b).needs_grad {
                    // dB = A^T . g
                    let at = transpose_raw(&self.node(*a).data, m, k);
                    let db = matmul_raw(&at, grad, k, m, n);
                    self.accumulate(grads, *b, &db);
                }
            }

            Op::Transpose(a) => {
                let (m, n) = (node.rows(), node.cols());
                let da = transpose_raw(grad, m, n);
                self.accumulate(grads, *a, &da);
            }

            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad);
                self.accumulate(grads, *b, grad);
            }

            Op::AddRow { matrix, row } => {
                self.accumulate(grads, *matrix, grad);
                if self.node(*row).needs_grad {
                    let (m, n) = (node.rows(), node.cols());
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += grad[i * n + j];
                        }
                    }
                    self.accumulate(grads, *row, &dr);
                }
            }

            Op::Mul(a, b) => {
                if self.node(*a).needs_grad {
                    let da: Vec<f64> =
                        grad.iter().zip(&self.node(*b).data).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.node(*b).needs_grad {
                    let db: Vec<f64> =
                        grad.iter().zip(&self.node(*a).data).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *b, &db);
                }
            }

            Op::Scale(a, c) => {
                let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(grads, *a, &da);
            }

            Op::Gelu(a) => {
                let da: Vec<f64> = grad
                    .iter()
                    .zip(&self.node(*a).data)
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(grads, *a, &da);
            }

            Op::SoftmaxRows(a) => {
                let (m, n) = (node.rows(), node.cols());
                let s = &node.data;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let row = i * n;
                    let dot: f64 = (0..n).map(|j| grad[row + j] * s[row + j]).sum();
                    for j in 0..n {
                        da[row + j] = s[row + j] * (grad[row + j] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = (node.rows(), node.cols());
                let src = &self.node(*x).data;
                let g_gain = &self.node(*gain).data;
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = &src[i * n..(i + 1) * n];
                    let g_row = &grad[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    for j in 0..n {
                        dgain[j] += g_row[j] * xhat[j];
                        dbias[j] += g_row[j];
                    }
                    let dxhat: Vec<f64> = (0..n).map(|j| g_row[j] * g_gain[j]).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let nf = n as f64;
                    for j in 0..n {
                        dx[i * n + j] =
                            inv_std / nf * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *bias, &dbias);
            }

            Op::Sum(a) => {
                let da = vec![grad[0]; self.node(*a).data.len()];
                self.accumulate(grads, *a, &da);
            }

            Op::BceWithLogits { logits, targets } => {
                let z = &self.node(*logits).data;
                let numel = z.len() as f64;
                let dz: Vec<f64> = z
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| grad[0] * (sigmoid(z) - y) / numel)
                    .collect();
                self.accumulate(grads, *logits, &dz);
            }

            Op::SliceRows { x, start } => {
                let n = node.cols();
                let parent_len = self.node(*x).data.len();
                let mut dx = vec![0.0; parent_len];
                dx[start * n..start * n + grad.len()].copy_from_slice(grad);
                self.accumulate(grads, *x, &dx);
            }

            Op::SliceCols { x, start } => {
                let (m, w) = (node.rows(), node.cols());
                let n = self.node(*x).cols();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&grad[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::ConcatRows(parts) => {
                let n = node.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows_p = self.node(p).rows();
                    let chunk = &grad[offset * n..(offset + rows_p) * n];
                    self.accumulate(grads, p, chunk);
                    offset += rows_p;
                }
            }

            Op::ConcatCols(parts) => {
                let m = node.rows();
                let total = node.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.node(p).cols();
                    if self.node(p).needs_grad {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&grad[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }
}
