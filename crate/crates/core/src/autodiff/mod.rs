//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! Every builder method evaluates its value eagerly and appends a node to the
//! tape, so parents always precede children and the backward pass is a single
//! reverse sweep. Trainable inputs are registered as named leaves; everything
//! else enters as a constant.
//!
//! [`Tape::detach`] inserts a stop-gradient: the value is copied forward but
//! nothing flows back into its parent.

mod check;

pub use check::{compare_grads, finite_differences, grad_check, GradCheckReport, ParamCheck, ABS_FLOOR};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{Matrix, RowVector, TensorError, DEFAULT_EPS};

/// Named parameter matrices, keyed by leaf name.
pub type ParamSet = BTreeMap<String, Matrix>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("column {column} has norm {norm:e} below eps {eps:e}; cannot normalize")]
    DegenerateColumn { column: usize, norm: f64, eps: f64 },
    #[error("loss must be 1x1, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("leaf {0:?} registered twice")]
    DuplicateLeaf(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    Relu(NodeId),
    Transpose(NodeId),
    /// `out[i][j] = v[j] * m[i][j]`
    RowBroadcastMul { v: NodeId, m: NodeId },
    /// `out[i][j] = m[i][j] / v[j]`
    RowBroadcastDiv { m: NodeId, v: NodeId },
    /// `out[i][j] = v[i] * m[i][j]`
    ScaleRows { v: NodeId, m: NodeId },
    /// `out[i][j] = m[i][j] + b[i]`
    AddColumnBias { m: NodeId, b: NodeId },
    ColumnNormalize { input: NodeId, norms: Vec<f64> },
    ColumnNorms(NodeId),
    SoftmaxColumns(NodeId),
    Mse { pred: NodeId, target: NodeId },
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, probs: Matrix },
    Detach(NodeId),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Hadamard(..) => "hadamard",
            Op::Relu(..) => "relu",
            Op::Transpose(..) => "transpose",
            Op::RowBroadcastMul { .. } => "row_broadcast_mul",
            Op::RowBroadcastDiv { .. } => "row_broadcast_div",
            Op::ScaleRows { .. } => "scale_rows",
            Op::AddColumnBias { .. } => "add_column_bias",
            Op::ColumnNormalize { .. } => "column_normalize",
            Op::ColumnNorms(..) => "column_norms",
            Op::SoftmaxColumns(..) => "softmax_columns",
            Op::Mse { .. } => "mse",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Detach(..) => "detach",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::ColumnNorms(a)
            | Op::SoftmaxColumns(a)
            | Op::Detach(a) => vec![*a],
            Op::ColumnNormalize { input, .. } => vec![*input],
            Op::SoftmaxXent { logits, .. } => vec![*logits],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
            Op::RowBroadcastMul { v, m } | Op::ScaleRows { v, m } => vec![*v, *m],
            Op::RowBroadcastDiv { m, v } => vec![*m, *v],
            Op::AddColumnBias { m, b } => vec![*m, *b],
            Op::Mse { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients of a scalar loss with respect to every registered leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_name: ParamSet,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.by_name.iter()
    }

    pub fn as_params(&self) -> &ParamSet {
        &self.by_name
    }

    pub fn into_params(self) -> ParamSet {
        self.by_name
    }
}

#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    eps: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_eps(DEFAULT_EPS)
    }

    /// `eps` is the smallest column norm `column_normalize` accepts.
    pub fn with_eps(eps: f64) -> Self {
        Self {
            nodes: Vec::new(),
            leaves: BTreeMap::new(),
            eps,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Total number of trainable scalars registered on this tape.
    pub fn leaf_scalar_count(&self) -> usize {
        self.leaves.values().map(|id| self.value(*id).len()).sum()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, name: impl Into<String>, value: Matrix) -> Result<NodeId> {
        let name = name.into();
        if self.leaves.contains_key(&name) {
            return Err(AutodiffError::DuplicateLeaf(name));
        }
        let id = self.push(Op::Leaf, value);
        self.leaves.insert(name, id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Scales column `j` of `m` by `v[j]`; `v` must be `1 × cols(m)`.
    pub fn row_broadcast_mul(&mut self, v: NodeId, m: NodeId) -> Result<NodeId> {
        let row = RowVector::from_matrix(self.value(v))?;
        let out = self.value(m).scale_columns(&row)?;
        Ok(self.push(Op::RowBroadcastMul { v, m }, out))
    }

    /// Divides column `j` of `m` by `v[j]`; `v` must be `1 × cols(m)`.
    pub fn row_broadcast_div(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let row = RowVector::from_matrix(self.value(v))?;
        let inv = RowVector::new(row.data().iter().map(|x| 1.0 / x).collect());
        let out = self.value(m).scale_columns(&inv)?;
        Ok(self.push(Op::RowBroadcastDiv { m, v }, out))
    }

    /// Scales row `i` of `m` by `v[i]`; `v` must be `1 × rows(m)`.
    pub fn scale_rows(&mut self, v: NodeId, m: NodeId) -> Result<NodeId> {
        let row = RowVector::from_matrix(self.value(v))?;
        let out = self.value(m).scale_rows(&row)?;
        Ok(self.push(Op::ScaleRows { v, m }, out))
    }

    /// Adds a `rows × 1` bias to every column of `m`.
    pub fn add_column_bias(&mut self, m: NodeId, b: NodeId) -> Result<NodeId> {
        let (mv, bv) = (self.value(m), self.value(b));
        if bv.cols() != 1 || bv.rows() != mv.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "add_column_bias",
                left: mv.shape(),
                right: bv.shape(),
            }
            .into());
        }
        let out = Matrix::from_fn(mv.rows(), mv.cols(), |r, c| mv.get(r, c) + bv.get(r, 0));
        Ok(self.push(Op::AddColumnBias { m, b }, out))
    }

    /// Fused `V / ‖V‖_c`. Fails if any column norm is at or below the tape eps.
    pub fn column_normalize(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        let norms = v.column_norms().data().to_vec();
        if let Some((column, &norm)) = norms.iter().enumerate().find(|(_, n)| **n <= self.eps) {
            return Err(AutodiffError::DegenerateColumn {
                column,
                norm,
                eps: self.eps,
            });
        }
        let inv = RowVector::new(norms.iter().map(|n| 1.0 / n).collect());
        let out = v.scale_columns(&inv)?;
        Ok(self.push(Op::ColumnNormalize { input, norms }, out))
    }

    /// `‖V‖_c` as a `1 × cols` node.
    pub fn column_norms(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).column_norms().to_matrix();
        self.push(Op::ColumnNorms(input), out)
    }

    /// Softmax down each column.
    pub fn softmax_columns(&mut self, input: NodeId) -> NodeId {
        let out = softmax_columns(self.value(input));
        self.push(Op::SoftmaxColumns(input), out)
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = self.value(pred).sub(self.value(target))?;
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
        Ok(self.push(Op::Mse { pred, target }, Matrix::filled(1, 1, loss)))
    }

    /// Mean cross-entropy of column-wise softmax `logits` (`classes × n`)
    /// against one label per column.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if labels.len() != lv.cols() {
            return Err(TensorError::LengthMismatch {
                xs: lv.cols(),
                ys: labels.len(),
            }
            .into());
        }
        if let Some(&label) = labels.iter().find(|l| **l >= lv.rows()) {
            return Err(AutodiffError::LabelOutOfRange {
                label,
                classes: lv.rows(),
            });
        }
        let probs = softmax_columns(lv);
        let n = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(j, &y)| -probs.get(y, j).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n;
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(op, Matrix::filled(1, 1, loss)))
    }

    /// Stop-gradient: same value, no gradient flows back to `input`.
    pub fn detach(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input).clone();
        self.push(Op::Detach(input), v)
    }

    /// Reverse sweep from a `1 × 1` loss. Unreached leaves get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (parent, contrib) in self.local_grads(node, &g)? {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            // leaves keep their accumulated gradient
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let by_name = self
            .leaves
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| {
                        let (r, c) = self.value(*id).shape();
                        Matrix::zeros(r, c)
                    });
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { by_name })
    }

    fn local_grads(&self, node: &Node, g: &Matrix) -> Result<Vec<(NodeId, Matrix)>> {
        let val = |id: NodeId| self.value(id);
        let out = match &node.op {
            Op::Leaf | Op::Constant | Op::Detach(_) => vec![],
            Op::Matmul(a, b) => vec![
                (*a, g.matmul(&val(*b).transpose())?),
                (*b, val(*a).transpose().matmul(g)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Hadamard(a, b) => vec![
                (*a, g.hadamard(val(*b))?),
                (*b, g.hadamard(val(*a))?),
            ],
            Op::Relu(a) => {
                let mask = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(*a, g.hadamard(&mask)?)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::RowBroadcastMul { v, m } => {
                let row = RowVector::from_matrix(val(*v))?;
                let gv = column_sums(&g.hadamard(val(*m))?);
                vec![(*v, gv), (*m, g.scale_columns(&row)?)]
            }
            Op::RowBroadcastDiv { m, v } => {
                let row = RowVector::from_matrix(val(*v))?;
                let inv = RowVector::new(row.data().iter().map(|x| 1.0 / x).collect());
                let neg_inv_sq = RowVector::new(row.data().iter().map(|x| -1.0 / (x * x)).collect());
                let gv = column_sums(&g.hadamard(val(*m))?.scale_columns(&neg_inv_sq)?);
                vec![(*m, g.scale_columns(&inv)?), (*v, gv)]
            }
            Op::ScaleRows { v, m } => {
                let row = RowVector::from_matrix(val(*v))?;
                let gv = row_sums(&g.hadamard(val(*m))?).transpose();
                vec![(*v, gv), (*m, g.scale_rows(&row)?)]
            }
            Op::AddColumnBias { m, b } => vec![(*m, g.clone()), (*b, row_sums(g))],
            Op::ColumnNormalize { input, norms } => {
                // per column: (I - û ûᵀ) g / ‖v‖
                let unit = &node.value;
                let mut out = Matrix::zeros(unit.rows(), unit.cols());
                for (j, n) in norms.iter().enumerate() {
                    let u = unit.column(j);
                    let gj = g.column(j);
                    let radial = crate::tensor::dot(&u, &gj);
                    let col: Vec<f64> = u.iter().zip(&gj).map(|(ui, gi)| (gi - ui * radial) / n).collect();
                    out.set_column(j, &col);
                }
                vec![(*input, out)]
            }
            Op::ColumnNorms(input) => {
                let v = val(*input);
                let norms = node.value.data();
                let out = Matrix::from_fn(v.rows(), v.cols(), |r, c| {
                    if norms[c] > 0.0 {
                        g.get(0, c) * v.get(r, c) / norms[c]
                    } else {
                        0.0
                    }
                });
                vec![(*input, out)]
            }
            Op::SoftmaxColumns(input) => {
                let p = &node.value;
                let mut out = Matrix::zeros(p.rows(), p.cols());
                for j in 0..p.cols() {
                    let pj = p.column(j);
                    let gj = g.column(j);
                    let inner = crate::tensor::dot(&pj, &gj);
                    let col: Vec<f64> = pj.iter().zip(&gj).map(|(pi, gi)| pi * (gi - inner)).collect();
                    out.set_column(j, &col);
                }
                vec![(*input, out)]
            }
            Op::Mse { pred, target } => {
                let diff = val(*pred).sub(val(*target))?;
                let d = diff.scale(2.0 * g.get(0, 0) / diff.len() as f64);
                vec![(*target, d.scale(-1.0)), (*pred, d)]
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let mut d = probs.clone();
                for (j, &y) in labels.iter().enumerate() {
                    d.set(y, j, d.get(y, j) - 1.0);
                }
                vec![(*logits, d.scale(g.get(0, 0) / labels.len() as f64))]
            }
        };
        Ok(out)
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            out.set(0, c, out.get(0, c) + v);
        }
    }
    out
}

fn row_sums(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum())
}

pub(crate) fn softmax_columns(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for j in 0..m.cols() {
        let col = m.column(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        out.set_column(j, &probs);
    }
    out
}
