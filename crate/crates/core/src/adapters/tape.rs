//! Recording adapter layers onto an autodiff [`Tape`].

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::tensor::Matrix;

use super::{check_columns, AdapterLayer, Result, Role, Variant};

/// What a standalone layer tape is trained against.
#[derive(Debug, Clone, PartialEq)]
pub enum LossTarget {
    /// Mean squared error against a `d × n` target.
    Regression(Matrix),
    /// Softmax cross-entropy with one class index per column.
    Classes(Vec<usize>),
}

impl LossTarget {
    pub fn attach(&self, tape: &mut Tape, pred: NodeId) -> std::result::Result<NodeId, AutodiffError> {
        match self {
            LossTarget::Regression(y) => {
                let y = tape.constant(y.clone());
                tape.mse(pred, y)
            }
            LossTarget::Classes(labels) => tape.softmax_xent(pred, labels),
        }
    }

    /// The same loss evaluated directly on a prediction matrix.
    pub fn evaluate(&self, pred: &Matrix) -> std::result::Result<f64, AutodiffError> {
        match self {
            LossTarget::Regression(y) => {
                let diff = pred.sub(y)?;
                Ok(diff.data().iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
            }
            LossTarget::Classes(labels) => {
                let mut tape = Tape::new();
                let p = tape.constant(pred.clone());
                let loss = tape.softmax_xent(p, labels)?;
                Ok(tape.value(loss).get(0, 0))
            }
        }
    }
}

struct Nodes {
    base: NodeId,
    magnitude: Option<NodeId>,
    b: Option<NodeId>,
    a: Option<NodeId>,
    lambda_b: Option<NodeId>,
    lambda_d: Option<NodeId>,
}

impl AdapterLayer {
    fn node(&self, tape: &mut Tape, prefix: &str, role: Role) -> Result<Option<NodeId>> {
        let Some(value) = self.role(role) else {
            return Ok(None);
        };
        let id = if self.variant().trainable_roles().contains(&role) {
            tape.leaf(format!("{prefix}{}", role.leaf_name()), value)?
        } else {
            tape.constant(value)
        };
        Ok(Some(id))
    }

    fn register(&self, tape: &mut Tape, prefix: &str) -> Result<Nodes> {
        Ok(Nodes {
            base: tape.constant(self.base.clone()),
            magnitude: self.node(tape, prefix, Role::M)?,
            b: self.node(tape, prefix, Role::B)?,
            a: self.node(tape, prefix, Role::A)?,
            lambda_b: self.node(tape, prefix, Role::LambdaB)?,
            lambda_d: self.node(tape, prefix, Role::LambdaD)?,
        })
    }

    /// `ΔV` as a node, or `ΔV x` when `x` is given.
    fn delta_node(&self, tape: &mut Tape, n: &Nodes, x: Option<NodeId>) -> Result<Option<NodeId>> {
        let (Some(b), Some(a)) = (n.b, n.a) else {
            return Ok(None);
        };
        let right = match x {
            Some(x) => tape.matmul(a, x)?,
            None => a,
        };
        let out = if self.variant().uses_vera_factors() {
            let (lb, ld) = (n.lambda_b.expect("vera lambda_b"), n.lambda_d.expect("vera lambda_d"));
            let scaled = tape.scale_rows(ld, right)?;
            let prod = tape.matmul(b, scaled)?;
            tape.scale_rows(lb, prod)?
        } else {
            let prod = tape.matmul(b, right)?;
            tape.scale(prod, self.config.scaling())
        };
        Ok(Some(out))
    }

    fn directional_node(&self, tape: &mut Tape, n: &Nodes) -> Result<NodeId> {
        Ok(match self.delta_node(tape, n, None)? {
            Some(delta) => tape.add(n.base, delta)?,
            None => n.base,
        })
    }

    /// Column norms of `V'` as a node; detached for `dora_detached`.
    fn norm_node(&self, tape: &mut Tape, vprime: NodeId) -> Result<NodeId> {
        check_columns(tape.value(vprime), self.config.eps)?;
        let norms = tape.column_norms(vprime);
        Ok(if self.variant() == Variant::DoraDetached {
            tape.detach(norms)
        } else {
            norms
        })
    }

    /// Records the effective weight `W'` and returns its node. Trainable
    /// tensors become leaves named `{prefix}{role}`.
    pub fn attach_weight(&self, tape: &mut Tape, prefix: &str) -> Result<NodeId> {
        if self.variant() == Variant::Ft {
            return Ok(self.node(tape, prefix, Role::Full)?.expect("ft weight"));
        }
        let n = self.register(tape, prefix)?;
        self.weight_from_nodes(tape, &n)
    }

    fn weight_from_nodes(&self, tape: &mut Tape, n: &Nodes) -> Result<NodeId> {
        let vprime = self.directional_node(tape, n)?;
        let Some(m) = n.magnitude else {
            return Ok(vprime);
        };
        let direction = match self.variant() {
            Variant::DoraDetached => {
                let norms = self.norm_node(tape, vprime)?;
                tape.row_broadcast_div(vprime, norms)?
            }
            Variant::MagnitudeOnly => {
                check_columns(&self.base, self.config.eps)?;
                tape.constant(self.base.normalize_columns(self.config.eps))
            }
            _ => tape.column_normalize(vprime)?,
        };
        Ok(tape.row_broadcast_mul(m, direction)?)
    }

    /// Records `W' x` for a `k × n` input node. With a dropout `mask`, the
    /// adapter branch sees `x ⊙ mask` and the base path sees `x`.
    pub fn attach(&self, tape: &mut Tape, prefix: &str, x: NodeId, mask: Option<&Matrix>) -> Result<NodeId> {
        let Some(mask) = mask.filter(|_| self.variant().is_low_rank()) else {
            let w = self.attach_weight(tape, prefix)?;
            return Ok(tape.matmul(w, x)?);
        };
        let n = self.register(tape, prefix)?;
        let mask = tape.constant(mask.clone());
        let dropped = tape.hadamard(x, mask)?;
        let (x, dropped) = match n.magnitude {
            Some(m) => {
                // W' x = W0 (c ⊙ x) + ΔV (c ⊙ x) with c = m / ‖V'‖_c per input row
                let vprime = self.directional_node(tape, &n)?;
                let norms = self.norm_node(tape, vprime)?;
                let c = tape.row_broadcast_div(m, norms)?;
                (tape.scale_rows(c, x)?, tape.scale_rows(c, dropped)?)
            }
            None => (x, dropped),
        };
        let base = tape.matmul(n.base, x)?;
        let branch = self.delta_node(tape, &n, Some(dropped))?.expect("low-rank branch");
        Ok(tape.add(base, branch)?)
    }

    /// Standalone single-layer tape: leaves are exactly the trainable tensors
    /// of the variant, named by role (`m`, `B`, `A`, `W`, `lambda_b`, `lambda_d`).
    pub fn build_tape(&self, x: &Matrix, target: &LossTarget, mask: Option<&Matrix>) -> Result<(Tape, NodeId)> {
        let mut tape = Tape::with_eps(self.config.eps);
        let xn = tape.constant(x.clone());
        let pred = self.attach(&mut tape, "", xn, mask)?;
        let loss = target.attach(&mut tape, pred)?;
        Ok((tape, loss))
    }
}
