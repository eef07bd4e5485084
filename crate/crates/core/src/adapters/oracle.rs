//! Three independent gradient computations for one adapter layer: the tape,
//! the closed form, and central finite differences.
//!
//! For `dora_detached` the finite-difference oracle differentiates the
//! surrogate loss whose column norms are frozen at the evaluation point,
//! `L(m ⊙ V'(θ) / C)` with `C = ‖V'(θ₀)‖_c`; differencing the true loss
//! would recover the full (non-detached) gradient instead.

use std::fmt;

use crate::autodiff::{compare_grads, finite_differences, GradCheckReport, ParamSet, ABS_FLOOR};
use crate::tensor::{Matrix, RowVector};

use super::gradients::{closed_form_param_grads, weight_gradient};
use super::{check_columns, AdapterLayer, LossTarget, Result, Variant};

/// Central-difference step scale.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TripleReport {
    /// Largest absolute entry difference between autodiff and closed form.
    pub autodiff_vs_closed: f64,
    pub autodiff_vs_fd: GradCheckReport,
    pub closed_vs_fd: GradCheckReport,
}

impl TripleReport {
    pub fn passed(&self, abs_tol: f64) -> bool {
        self.autodiff_vs_closed < abs_tol && self.autodiff_vs_fd.passed() && self.closed_vs_fd.passed()
    }
}

impl fmt::Display for TripleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "autodiff vs closed form: max abs {:.3e}", self.autodiff_vs_closed)?;
        writeln!(f, "autodiff vs finite differences (rel tol {:.0e}):", self.autodiff_vs_fd.tol)?;
        write!(f, "{}", self.autodiff_vs_fd)?;
        writeln!(f, "closed form vs finite differences (rel tol {:.0e}):", self.closed_vs_fd.tol)?;
        write!(f, "{}", self.closed_vs_fd)
    }
}

fn max_abs_diff(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (name, ga) in a {
        match b.get(name) {
            Some(gb) => worst = worst.max(ga.max_abs_diff(gb)?),
            None => return Ok(f64::INFINITY),
        }
    }
    if a.len() != b.len() {
        return Ok(f64::INFINITY);
    }
    Ok(worst)
}

/// Loss as a function of the trainable tensors, with detached norms frozen
/// at `layer`'s current state.
fn loss_fn<'a>(
    layer: &'a AdapterLayer,
    x: &'a Matrix,
    target: &'a LossTarget,
) -> Result<impl Fn(&ParamSet) -> Result<f64> + 'a> {
    let frozen = match layer.variant() {
        Variant::DoraDetached => Some(check_columns(&layer.directional()?, layer.config.eps)?),
        _ => None,
    };
    Ok(move |params: &ParamSet| {
        let moved = layer.with_params(params)?;
        let w = match &frozen {
            Some(c) => {
                let m = moved.magnitude.as_ref().expect("decomposed layer has m");
                let scale = RowVector::new(m.data().iter().zip(c.data()).map(|(m, c)| m / c).collect());
                moved.directional()?.scale_columns(&scale)?
            }
            None => moved.effective_weight()?,
        };
        Ok(target.evaluate(&w.matmul(x)?)?)
    })
}

/// Runs all three oracles on `loss = target(W' x)` at the layer's current
/// parameters; finite-difference agreement uses relative tolerance `fd_tol`.
pub fn triple_check(layer: &AdapterLayer, x: &Matrix, target: &LossTarget, fd_tol: f64) -> Result<TripleReport> {
    let (tape, loss) = layer.build_tape(x, target, None)?;
    let autodiff = tape.backward(loss)?.into_params();
    let upstream = weight_gradient(&layer.effective_weight()?, x, target)?;
    let closed = closed_form_param_grads(layer, &upstream)?;
    let numeric = finite_differences(loss_fn(layer, x, target)?, &layer.trainable_params(), FD_STEP)?;
    Ok(TripleReport {
        autodiff_vs_closed: max_abs_diff(&autodiff, &closed)?,
        autodiff_vs_fd: compare_grads(&autodiff, &numeric, fd_tol, ABS_FLOOR),
        closed_vs_fd: compare_grads(&closed, &numeric, fd_tol, ABS_FLOOR),
    })
}
