//! Tape-based reverse-mode autodiff over flat `f64` buffers.
//!
//! Ops are recorded in creation order, which is already topological
//! (parents always precede children), so [`Graph::backward`] is a single
//! reverse sweep that visits every node exactly once. Scalars have shape
//! `[]`; everything learned here is 1-D or 2-D row-major.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// x [r×c] plus a bias row [c].
    AddBias(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    SoftmaxRows(NodeId),
    /// Row softmax with entries excluded exactly (weight 0, max/sum over
    /// the unblocked set only); blocked outputs are exactly 0, which is
    /// all the backward pass needs.
    MaskedSoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Abs(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Rc<Vec<usize>>),
    SliceCols(NodeId, usize),
    /// out[i] = x[i, idx[i]].
    SelectPerRow(NodeId, Rc<Vec<usize>>),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// Pairwise cosine similarity between rows of p and rows of q.
    CosineRows(NodeId, NodeId),
    /// Bilinear s×s pooling of normalized boxes over a feature grid.
    RoiAlign {
        grid: NodeId,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        samples: usize,
        boxes: Rc<Vec<[f64; 4]>>,
    },
    /// out[i] = 1 − GIoU(pred_i, target_i), boxes as (cx, cy, w, h).
    GiouLoss(NodeId, Rc<Vec<[f64; 4]>>),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Gradients of one backward sweep, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Recorded computation: one forward pass, one backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    /// Copy a node's value out as a plain tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("node shape/value always agree")
    }

    fn rows(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape[0]
    }

    fn cols(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape[1]
    }

    fn check_2d(&self, id: NodeId, context: &'static str) -> Result<()> {
        if self.nodes[id.0].shape.len() != 2 {
            return Err(Error::Shape {
                context,
                lhs: self.nodes[id.0].shape.clone(),
                rhs: vec![],
            });
        }
        Ok(())
    }

    // ---- node constructors ------------------------------------------------

    /// Insert a tensor as a leaf; grad participation follows the tensor flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.wants_grad())
    }

    /// Insert raw data as a non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                context: "Graph::constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), value, rg))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| -x).collect();
        let rg = self.wants(a);
        self.push(Op::Neg(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        let rg = self.wants(a);
        self.push(Op::Scale(a, k), self.nodes[a.0].shape.clone(), value, rg)
    }

    /// x [r×c] + bias [c] broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_2d(x, "add_bias")?;
        let (r, c) = (self.rows(x), self.cols(x));
        if self.nodes[bias.0].shape != [c] {
            return Err(Error::Shape {
                context: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut value = self.nodes[x.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] += self.nodes[bias.0].value[j];
            }
        }
        let rg = self.wants(x) || self.wants(bias);
        Ok(self.push(Op::AddBias(x, bias), vec![r, c], value, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_2d(a, "matmul")?;
        self.check_2d(b, "matmul")?;
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(Error::Shape {
                context: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let value = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], value, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_2d(a, "transpose")?;
        let (r, c) = (self.rows(a), self.cols(a));
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.wants(a);
        Ok(self.push(Op::Transpose(a), vec![c, r], value, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].value.len() {
            return Err(Error::Shape {
                context: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let value = self.nodes[a.0].value.clone();
        let rg = self.wants(a);
        Ok(self.push(Op::Reshape(a), shape, value, rg))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_2d(a, "softmax_rows")?;
        let (r, c) = (self.rows(a), self.cols(a));
        let value = softmax_rows_raw(&self.nodes[a.0].value, r, c);
        let rg = self.wants(a);
        Ok(self.push(Op::SoftmaxRows(a), vec![r, c], value, rg))
    }

    /// Softmax per row with `blocked` entries excluded exactly: blocked
    /// weights are 0.0 and play no part in the max or the normalizer, so a
    /// row's output is bitwise independent of blocked columns. A fully
    /// blocked row softmaxes to all zeros.
    pub fn masked_softmax_rows(&mut self, a: NodeId, blocked: Vec<bool>) -> Result<NodeId> {
        self.check_2d(a, "masked_softmax_rows")?;
        let (r, c) = (self.rows(a), self.cols(a));
        if blocked.len() != r * c {
            return Err(Error::Shape {
                context: "masked_softmax_rows",
                lhs: vec![r, c],
                rhs: vec![blocked.len()],
            });
        }
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mask = &blocked[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if !mask[j] {
                    max = max.max(row[j]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully blocked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..c {
                if !mask[j] {
                    let e = (row[j] - max).exp();
                    value[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                if !mask[j] {
                    value[i * c + j] /= sum;
                }
            }
        }
        let rg = self.wants(a);
        Ok(self.push(Op::MaskedSoftmaxRows(a), vec![r, c], value, rg))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_2d(a, "log_softmax_rows")?;
        let (r, c) = (self.rows(a), self.cols(a));
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for j in 0..c {
                value[i * c + j] = row[j] - log_sum;
            }
        }
        let rg = self.wants(a);
        Ok(self.push(Op::LogSoftmaxRows(a), vec![r, c], value, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let rg = self.wants(a);
        self.push(Op::Sigmoid(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let rg = self.wants(a);
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.abs()).collect();
        let rg = self.wants(a);
        self.push(Op::Abs(a), self.nodes[a.0].shape.clone(), value, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        let rg = self.wants(a);
        self.push(Op::SumAll(a), vec![], value, rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len().max(1);
        let value = vec![self.nodes[a.0].value.iter().sum::<f64>() / n as f64];
        let rg = self.wants(a);
        self.push(Op::MeanAll(a), vec![], value, rg)
    }

    /// Stack 2-D inputs on the row axis; column counts must agree.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let c = self.cols(parts[0]);
        let mut value = Vec::new();
        let mut r_total = 0;
        for &p in parts {
            self.check_2d(p, "concat_rows")?;
            if self.cols(p) != c {
                return Err(Error::Shape {
                    context: "concat_rows",
                    lhs: vec![self.rows(parts[0]), c],
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            r_total += self.rows(p);
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = parts.iter().any(|&p| self.wants(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![r_total, c], value, rg))
    }

    /// Stack 2-D inputs on the column axis; row counts must agree.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let r = self.rows(parts[0]);
        let mut c_total = 0;
        for &p in parts {
            self.check_2d(p, "concat_cols")?;
            if self.rows(p) != r {
                return Err(Error::Shape {
                    context: "concat_cols",
                    lhs: vec![r, self.cols(parts[0])],
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            c_total += self.cols(p);
        }
        let mut value = vec![0.0; r * c_total];
        let mut offset = 0;
        for &p in parts {
            let pc = self.cols(p);
            for i in 0..r {
                for j in 0..pc {
                    value[i * c_total + offset + j] = self.nodes[p.0].value[i * pc + j];
                }
            }
            offset += pc;
        }
        let rg = parts.iter().any(|&p| self.wants(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![r, c_total], value, rg))
    }

    /// Pick rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.check_2d(a, "gather_rows")?;
        let (r, c) = (self.rows(a), self.cols(a));
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range ({r} rows)"
            )));
        }
        let mut value = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            value.extend_from_slice(&self.nodes[a.0].value[i * c..(i + 1) * c]);
        }
        let rg = self.wants(a);
        let n = indices.len();
        Ok(self.push(Op::GatherRows(a, Rc::new(indices)), vec![n, c], value, rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.gather_rows(a, (start..start + len).collect())
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check_2d(a, "slice_cols")?;
        let (r, c) = (self.rows(a), self.cols(a));
        if start + len > c {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of range ({c} cols)",
                start + len
            )));
        }
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&self.nodes[a.0].value[i * c + start..i * c + start + len]);
        }
        let rg = self.wants(a);
        Ok(self.push(Op::SliceCols(a, start), vec![r, len], value, rg))
    }

    /// out[i] = x[i, idx[i]].
    pub fn select_per_row(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.check_2d(a, "select_per_row")?;
        let (r, c) = (self.rows(a), self.cols(a));
        if indices.len() != r {
            return Err(Error::LengthMismatch {
                context: "select_per_row",
                left: r,
                right: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!(
                "select_per_row column {bad} out of range ({c} cols)"
            )));
        }
        let value: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(i, &j)| self.nodes[a.0].value[i * c + j])
            .collect();
        let rg = self.wants(a);
        Ok(self.push(Op::SelectPerRow(a, Rc::new(indices)), vec![r], value, rg))
    }

    /// Per-row layer normalization with learned gain/shift.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.check_2d(x, "layer_norm_rows")?;
        let (r, c) = (self.rows(x), self.cols(x));
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(Error::Shape {
                context: "layer_norm_rows",
                lhs: vec![r, c],
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let (mean, inv_std) = row_norm_stats(row, eps);
            for j in 0..c {
                value[i * c + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.wants(x) || self.wants(gamma) || self.wants(beta);
        Ok(self.push(
            Op::LayerNormRows { x, gamma, beta, eps },
            vec![r, c],
            value,
            rg,
        ))
    }

    /// S[i][j] = cos(p_i, q_j); a pair with a near-zero norm similarity 0.
    pub fn cosine_rows(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        self.check_2d(p, "cosine_rows")?;
        self.check_2d(q, "cosine_rows")?;
        let d = self.cols(p);
        if self.cols(q) != d {
            return Err(Error::Shape {
                context: "cosine_rows",
                lhs: self.nodes[p.0].shape.clone(),
                rhs: self.nodes[q.0].shape.clone(),
            });
        }
        let (m, n) = (self.rows(p), self.rows(q));
        let pv = &self.nodes[p.0].value;
        let qv = &self.nodes[q.0].value;
        let pn: Vec<f64> = (0..m).map(|i| row_norm(&pv[i * d..(i + 1) * d])).collect();
        let qn: Vec<f64> = (0..n).map(|j| row_norm(&qv[j * d..(j + 1) * d])).collect();
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                if pn[i] > COSINE_NORM_FLOOR && qn[j] > COSINE_NORM_FLOOR {
                    let dot: f64 = (0..d).map(|k| pv[i * d + k] * qv[j * d + k]).sum();
                    value[i * n + j] = dot / (pn[i] * qn[j]);
                }
            }
        }
        let rg = self.wants(p) || self.wants(q);
        Ok(self.push(Op::CosineRows(p, q), vec![m, n], value, rg))
    }

    /// Bilinear s×s pooling over a `grid` node of shape [h·w × channels].
    /// Boxes are (cx, cy, w, h) in normalized image coordinates and are
    /// treated as constants; gradients flow into the grid only.
    pub fn roi_align(
        &mut self,
        grid: NodeId,
        grid_h: usize,
        grid_w: usize,
        samples: usize,
        boxes: Vec<[f64; 4]>,
    ) -> Result<NodeId> {
        self.check_2d(grid, "roi_align")?;
        let channels = self.cols(grid);
        if self.rows(grid) != grid_h * grid_w {
            return Err(Error::Shape {
                context: "roi_align",
                lhs: self.nodes[grid.0].shape.clone(),
                rhs: vec![grid_h * grid_w, channels],
            });
        }
        if samples == 0 {
            return Err(Error::Contract("roi_align needs samples >= 1".into()));
        }
        let n = boxes.len();
        let out_cols = samples * samples * channels;
        let mut value = vec![0.0; n * out_cols];
        let gv = &self.nodes[grid.0].value;
        for (bi, bx) in boxes.iter().enumerate() {
            for (si, pt) in roi_sample_points(bx, samples).enumerate() {
                let taps = bilinear_taps(pt.0, pt.1, grid_h, grid_w);
                for ch in 0..channels {
                    let mut acc = 0.0;
                    for &(cell, w) in &taps {
                        acc += gv[cell * channels + ch] * w;
                    }
                    value[bi * out_cols + si * channels + ch] = acc;
                }
            }
        }
        let rg = self.wants(grid);
        Ok(self.push(
            Op::RoiAlign {
                grid,
                grid_h,
                grid_w,
                channels,
                samples,
                boxes: Rc::new(boxes),
            },
            vec![n, out_cols],
            value,
            rg,
        ))
    }

    /// out[i] = 1 − GIoU(pred_i, target_i); targets are constants.
    pub fn giou_pair_loss(&mut self, pred: NodeId, targets: Vec<[f64; 4]>) -> Result<NodeId> {
        self.check_2d(pred, "giou_pair_loss")?;
        let (n, c) = (self.rows(pred), self.cols(pred));
        if c != 4 || n != targets.len() {
            return Err(Error::Shape {
                context: "giou_pair_loss",
                lhs: vec![n, c],
                rhs: vec![targets.len(), 4],
            });
        }
        let pv = &self.nodes[pred.0].value;
        let mut value = vec![0.0; n];
        for i in 0..n {
            let p: [f64; 4] = pv[i * 4..(i + 1) * 4].try_into().unwrap();
            value[i] = 1.0 - giou_cxcywh(&p, &targets[i]).0;
        }
        let rg = self.wants(pred);
        Ok(self.push(Op::GiouLoss(pred, Rc::new(targets)), vec![n], value, rg))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                context,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss; returns per-node gradients for
    /// every node on a `requires_grad` path.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_parents(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Vec<f64>>], p: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[p.0].requires_grad {
                return;
            }
            let buf = grads[p.0].get_or_insert_with(|| vec![0.0; self.nodes[p.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |buf| {
                    for (o, x) in buf.iter_mut().zip(g) {
                        *o += x;
                    }
                });
                acc(grads, *b, &mut |buf| {
                    for (o, x) in buf.iter_mut().zip(g) {
                        *o += x;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |buf| {
                    for (o, x) in buf.iter_mut().zip(g) {
                        *o += x;
                    }
                });
                acc(grads, *b, &mut |buf| {
                    for (o, x) in buf.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Neg(a) => acc(grads, *a, &mut |buf| {
                for (o, x) in buf.iter_mut().zip(g) {
                    *o -= x;
                }
            }),
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(grads, *a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * bv[k];
                    }
                });
                acc(grads, *b, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(a, k) => {
                let k = *k;
                acc(grads, *a, &mut |buf| {
                    for (o, x) in buf.iter_mut().zip(g) {
                        *o += k * x;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let c = self.nodes[bias.0].value.len();
                acc(grads, *x, &mut |buf| {
                    for (o, v) in buf.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                acc(grads, *bias, &mut |buf| {
                    for (k, v) in g.iter().enumerate() {
                        buf[k % c] += v;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(grads, *a, &mut |buf| {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        let buf_row = &mut buf[i * k..(i + 1) * k];
                        for (j, slot) in buf_row.iter_mut().enumerate() {
                            let b_row = &bv[j * n..(j + 1) * n];
                            let mut s = 0.0;
                            for (&gv, &bw) in g_row.iter().zip(b_row) {
                                s += gv * bw;
                            }
                            *slot += s;
                        }
                    }
                });
                acc(grads, *b, &mut |buf| {
                    // dB = Aᵀ · G
                    for t in 0..m {
                        let a_row = &av[t * k..(t + 1) * k];
                        let g_row = &g[t * n..(t + 1) * n];
                        for (i, &aw) in a_row.iter().enumerate() {
                            if aw == 0.0 {
                                continue;
                            }
                            let buf_row = &mut buf[i * n..(i + 1) * n];
                            for (o, &gv) in buf_row.iter_mut().zip(g_row) {
                                *o += aw * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                acc(grads, *a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(grads, *a, &mut |buf| {
                for (o, x) in buf.iter_mut().zip(g) {
                    *o += x;
                }
            }),
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                // y blocked entries are exactly 0 so the same formula covers
                // the masked case: dx = y ∘ (g − Σ g·y).
                let (r, c) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                acc(grads, *a, &mut |buf| {
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            buf[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let y = &node.value;
                acc(grads, *a, &mut |buf| {
                    for i in 0..r {
                        let gsum: f64 = (0..c).map(|j| g[i * c + j]).sum();
                        for j in 0..c {
                            buf[i * c + j] += g[i * c + j] - y[i * c + j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(grads, *a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Relu(a) => {
                let xv = &self.nodes[a.0].value;
                acc(grads, *a, &mut |buf| {
                    for k in 0..buf.len() {
                        if xv[k] > 0.0 {
                            buf[k] += g[k];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let xv = &self.nodes[a.0].value;
                acc(grads, *a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * xv[k].signum() * if xv[k] == 0.0 { 0.0 } else { 1.0 };
                    }
                });
            }
            Op::SumAll(a) => acc(grads, *a, &mut |buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len().max(1) as f64;
                acc(grads, *a, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let c = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pr = self.nodes[p.0].shape[0];
                    acc(grads, p, &mut |buf| {
                        for k in 0..pr * c {
                            buf[k] += g[offset * c + k];
                        }
                    });
                    offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c_total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].shape[1];
                    acc(grads, p, &mut |buf| {
                        for i in 0..r {
                            for j in 0..pc {
                                buf[i * pc + j] += g[i * c_total + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::GatherRows(a, indices) => {
                let c = node.shape[1];
                acc(grads, *a, &mut |buf| {
                    for (out_i, &src_i) in indices.iter().enumerate() {
                        for j in 0..c {
                            buf[src_i * c + j] += g[out_i * c + j];
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (r, len) = (node.shape[0], node.shape[1]);
                let c = self.nodes[a.0].shape[1];
                let start = *start;
                acc(grads, *a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..len {
                            buf[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::SelectPerRow(a, indices) => {
                let c = self.nodes[a.0].shape[1];
                acc(grads, *a, &mut |buf| {
                    for (i, &j) in indices.iter().enumerate() {
                        buf[i * c + j] += g[i];
                    }
                });
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                acc(grads, *beta, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j];
                        }
                    }
                });
                acc(grads, *gamma, &mut |buf| {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let (mean, inv_std) = row_norm_stats(row, *eps);
                        for j in 0..c {
                            buf[j] += g[i * c + j] * (row[j] - mean) * inv_std;
                        }
                    }
                });
                acc(grads, *x, &mut |buf| {
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let (mean, inv_std) = row_norm_stats(row, *eps);
                        // d = g ∘ γ; dx = inv_std · (d − mean(d) − x̂ · mean(d ∘ x̂))
                        let mut d_mean = 0.0;
                        let mut dxh_mean = 0.0;
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            let xh = (row[j] - mean) * inv_std;
                            d_mean += d;
                            dxh_mean += d * xh;
                        }
                        d_mean /= c as f64;
                        dxh_mean /= c as f64;
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            let xh = (row[j] - mean) * inv_std;
                            buf[i * c + j] += inv_std * (d - d_mean - xh * dxh_mean);
                        }
                    }
                });
            }
            Op::CosineRows(p, q) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let d = self.nodes[p.0].shape[1];
                let pv = &self.nodes[p.0].value;
                let qv = &self.nodes[q.0].value;
                let s = &node.value;
                let pn: Vec<f64> = (0..m).map(|i| row_norm(&pv[i * d..(i + 1) * d])).collect();
                let qn: Vec<f64> = (0..n).map(|j| row_norm(&qv[j * d..(j + 1) * d])).collect();
                acc(grads, *p, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            if pn[i] <= COSINE_NORM_FLOOR || qn[j] <= COSINE_NORM_FLOOR {
                                continue;
                            }
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                buf[i * d + k] += gij
                                    * (qv[j * d + k] / (pn[i] * qn[j])
                                        - s[i * n + j] * pv[i * d + k] / (pn[i] * pn[i]));
                            }
                        }
                    }
                });
                acc(grads, *q, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            if pn[i] <= COSINE_NORM_FLOOR || qn[j] <= COSINE_NORM_FLOOR {
                                continue;
                            }
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                buf[j * d + k] += gij
                                    * (pv[i * d + k] / (pn[i] * qn[j])
                                        - s[i * n + j] * qv[j * d + k] / (qn[j] * qn[j]));
                            }
                        }
                    }
                });
            }
            Op::RoiAlign {
                grid,
                grid_h,
                grid_w,
                channels,
                samples,
                boxes,
            } => {
                let (gh, gw, ch, s) = (*grid_h, *grid_w, *channels, *samples);
                let out_cols = s * s * ch;
                acc(grads, *grid, &mut |buf| {
                    for (bi, bx) in boxes.iter().enumerate() {
                        for (si, pt) in roi_sample_points(bx, s).enumerate() {
                            let taps = bilinear_taps(pt.0, pt.1, gh, gw);
                            for c in 0..ch {
                                let go = g[bi * out_cols + si * ch + c];
                                if go == 0.0 {
                                    continue;
                                }
                                for &(cell, w) in &taps {
                                    buf[cell * ch + c] += go * w;
                                }
                            }
                        }
                    }
                });
            }
            Op::GiouLoss(pred, targets) => {
                let pv = &self.nodes[pred.0].value;
                acc(grads, *pred, &mut |buf| {
                    for (i, t) in targets.iter().enumerate() {
                        let p: [f64; 4] = pv[i * 4..(i + 1) * 4].try_into().unwrap();
                        let (_, dg) = giou_cxcywh(&p, t);
                        for k in 0..4 {
                            buf[i * 4 + k] -= g[i] * dg[k]; // loss = 1 − giou
                        }
                    }
                });
            }
        }
    }
}

const COSINE_NORM_FLOOR: f64 = 1e-12;

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_rows_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] /= sum;
        }
    }
    out
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Sample-point centers of an s×s grid inside a normalized (cx,cy,w,h) box.
fn roi_sample_points(bx: &[f64; 4], s: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
    let x0 = bx[0] - bx[2] / 2.0;
    let y0 = bx[1] - bx[3] / 2.0;
    let (w, h) = (bx[2], bx[3]);
    (0..s * s).map(move |i| {
        let (v, u) = (i / s, i % s);
        (
            x0 + (u as f64 + 0.5) / s as f64 * w,
            y0 + (v as f64 + 0.5) / s as f64 * h,
        )
    })
}

/// Four (cell, weight) taps for bilinear sampling at a normalized point.
/// Cell centers sit at ((j + 0.5)/w, (i + 0.5)/h); coordinates clamp to the
/// border so pre-clipped boxes never index out of range.
fn bilinear_taps(x: f64, y: f64, grid_h: usize, grid_w: usize) -> [(usize, f64); 4] {
    let gx = (x * grid_w as f64 - 0.5).clamp(0.0, (grid_w - 1) as f64);
    let gy = (y * grid_h as f64 - 0.5).clamp(0.0, (grid_h - 1) as f64);
    let x0 = gx.floor() as usize;
    let y0 = gy.floor() as usize;
    let x1 = (x0 + 1).min(grid_w - 1);
    let y1 = (y0 + 1).min(grid_h - 1);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    [
        (y0 * grid_w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * grid_w + x1, fx * (1.0 - fy)),
        (y1 * grid_w + x0, (1.0 - fx) * fy),
        (y1 * grid_w + x1, fx * fy),
    ]
}

/// GIoU of two (cx,cy,w,h) boxes plus its gradient w.r.t. the first box.
fn giou_cxcywh(p: &[f64; 4], t: &[f64; 4]) -> (f64, [f64; 4]) {
    let (px0, px1) = (p[0] - p[2] / 2.0, p[0] + p[2] / 2.0);
    let (py0, py1) = (p[1] - p[3] / 2.0, p[1] + p[3] / 2.0);
    let (tx0, tx1) = (t[0] - t[2] / 2.0, t[0] + t[2] / 2.0);
    let (ty0, ty1) = (t[1] - t[3] / 2.0, t[1] + t[3] / 2.0);

    let area_p = (px1 - px0) * (py1 - py0);
    let area_t = (tx1 - tx0) * (ty1 - ty0);
    let iw = (px1.min(tx1) - px0.max(tx0)).max(0.0);
    let ih = (py1.min(ty1) - py0.max(ty0)).max(0.0);
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let cw = px1.max(tx1) - px0.min(tx0);
    let chh = py1.max(ty1) - py0.min(ty0);
    let cover = cw * chh;
    let giou = inter / union - (cover - union) / cover;

    // Partials in corner space (x0, x1, y0, y1 of the prediction).
    let da = [-(py1 - py0), py1 - py0, -(px1 - px0), px1 - px0];
    let mut di = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if px0 >= tx0 {
            di[0] = -ih;
        }
        if px1 <= tx1 {
            di[1] = ih;
        }
        if py0 >= ty0 {
            di[2] = -iw;
        }
        if py1 <= ty1 {
            di[3] = iw;
        }
    }
    let mut dc = [0.0; 4];
    if px0 <= tx0 {
        dc[0] = -chh;
    }
    if px1 >= tx1 {
        dc[1] = chh;
    }
    if py0 <= ty0 {
        dc[2] = -cw;
    }
    if py1 >= ty1 {
        dc[3] = cw;
    }

    let mut d_corner = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        d_corner[k] = (di[k] * union - inter * du) / (union * union)
            - (dc[k] * union - cover * du) / (cover * cover);
    }
    // Chain to (cx, cy, w, h): x0 = cx − w/2, x1 = cx + w/2, same in y.
    let d = [
        d_corner[0] + d_corner[1],
        d_corner[2] + d_corner[3],
        0.5 * (d_corner[1] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[2]),
    ];
    (giou, d)
}
