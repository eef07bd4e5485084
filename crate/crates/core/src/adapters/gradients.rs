//! Closed-form gradients of the decomposed weight `W' = m ⊙ V' / ‖V'‖_c`.
//!
//! Given the upstream gradient `G = ∂L/∂W'`, per column `j` with
//! `v̂_j = v'_j / ‖v'_j‖`:
//!
//! ```text
//! ∂L/∂m_j   = g_j · v̂_j
//! ∂L/∂v'_j  = (m_j / ‖v'_j‖) (I − v̂_j v̂_jᵀ) g_j      (full)
//! ∂L/∂v'_j  = (m_j / ‖v'_j‖) g_j                      (norm detached)
//! ```
//!
//! These are evaluated directly, independent of the tape, so they can be
//! cross-checked against autodiff and finite differences.

use crate::autodiff::{ParamSet, Tape};
use crate::tensor::{column_cosine, dot, norm, Matrix, RowVector, DEFAULT_EPS};

use super::{check_columns, AdapterError, AdapterLayer, LossTarget, Result, Role, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormGrads {
    pub magnitude: RowVector,
    pub vprime: Matrix,
}

fn check_upstream(layer: &AdapterLayer, upstream: &Matrix) -> Result<()> {
    if upstream.shape() != layer.base.shape() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "closed_form_grads",
            left: layer.base.shape(),
            right: upstream.shape(),
        }
        .into());
    }
    Ok(())
}

/// Gradients with respect to `m` and `V'` for a decomposed layer.
pub fn closed_form_grads(layer: &AdapterLayer, upstream: &Matrix) -> Result<ClosedFormGrads> {
    let variant = layer.variant();
    if !variant.is_decomposed() {
        return Err(AdapterError::NotDecomposed(variant));
    }
    check_upstream(layer, upstream)?;
    let m = layer
        .magnitude
        .as_ref()
        .ok_or_else(|| AdapterError::MissingParam("m".into()))?;
    let vprime = layer.directional()?;
    let norms = check_columns(&vprime, layer.config.eps)?;
    let (d, k) = vprime.shape();

    let mut grad_m = Vec::with_capacity(k);
    let mut grad_v = Matrix::zeros(d, k);
    for j in 0..k {
        let n = norms.get(j);
        let hat: Vec<f64> = vprime.column(j).iter().map(|x| x / n).collect();
        let g = upstream.column(j);
        let radial = dot(&g, &hat);
        grad_m.push(radial);
        let scale = m.get(j) / n;
        let col: Vec<f64> = if variant == Variant::DoraDetached {
            g.iter().map(|gi| scale * gi).collect()
        } else {
            g.iter().zip(&hat).map(|(gi, hi)| scale * (gi - hi * radial)).collect()
        };
        grad_v.set_column(j, &col);
    }
    Ok(ClosedFormGrads {
        magnitude: RowVector::new(grad_m),
        vprime: grad_v,
    })
}

/// `∂L/∂V'` pushed through the factors of `ΔV`.
fn chain_to_factors(layer: &AdapterLayer, grad_v: &Matrix, out: &mut ParamSet) -> Result<()> {
    let (Some(b), Some(a)) = (&layer.lora_b, &layer.lora_a) else {
        return Err(AdapterError::MissingParam("B".into()));
    };
    match layer.variant() {
        Variant::Lora | Variant::Dora | Variant::DoraDetached => {
            let s = layer.config.scaling();
            out.insert("B".into(), grad_v.matmul(&a.transpose())?.scale(s));
            out.insert("A".into(), b.transpose().matmul(grad_v)?.scale(s));
        }
        Variant::Vera | Variant::Dvora => {
            let lb = layer.lambda_b.as_ref().ok_or_else(|| AdapterError::MissingParam("lambda_b".into()))?;
            let ld = layer.lambda_d.as_ref().ok_or_else(|| AdapterError::MissingParam("lambda_d".into()))?;
            // ΔV = diag(λ_b) B diag(λ_d) A
            let bda = b.scale_columns(ld)?.matmul(a)?;
            let gb: Vec<f64> = (0..grad_v.rows()).map(|i| dot(grad_v.row(i), bda.row(i))).collect();
            // ∂/∂λ_d[l] = (Bᵀ diag(λ_b) G Aᵀ)[l][l]
            let inner = b.transpose().matmul(&grad_v.scale_rows(lb)?)?.matmul(&a.transpose())?;
            let gd: Vec<f64> = (0..ld.len()).map(|l| inner.get(l, l)).collect();
            out.insert("lambda_b".into(), RowVector::new(gb).to_matrix());
            out.insert("lambda_d".into(), RowVector::new(gd).to_matrix());
        }
        _ => {}
    }
    Ok(())
}

/// Closed-form gradients of every trainable tensor of any variant, keyed by
/// leaf name, from the upstream `∂L/∂W'`.
pub fn closed_form_param_grads(layer: &AdapterLayer, upstream: &Matrix) -> Result<ParamSet> {
    check_upstream(layer, upstream)?;
    let mut out = ParamSet::new();
    match layer.variant() {
        Variant::Ft => {
            out.insert(Role::Full.leaf_name().into(), upstream.clone());
        }
        Variant::Lora | Variant::Vera => chain_to_factors(layer, upstream, &mut out)?,
        Variant::MagnitudeOnly => {
            let g = closed_form_grads(layer, upstream)?;
            out.insert("m".into(), g.magnitude.to_matrix());
        }
        Variant::Dora | Variant::DoraDetached | Variant::Dvora => {
            let g = closed_form_grads(layer, upstream)?;
            out.insert("m".into(), g.magnitude.to_matrix());
            chain_to_factors(layer, &g.vprime, &mut out)?;
        }
    }
    Ok(out)
}

/// Per-column term removed by detaching the norm:
/// `∂V'(full) − ∂V'(detached) = −(m_j/‖v'_j‖) v̂_j (v̂_jᵀ g_j)`.
pub fn detach_delta(layer: &AdapterLayer, upstream: &Matrix) -> Result<Matrix> {
    check_upstream(layer, upstream)?;
    let m = layer
        .magnitude
        .as_ref()
        .ok_or(AdapterError::NotDecomposed(layer.variant()))?;
    let vprime = layer.directional()?;
    let norms = check_columns(&vprime, layer.config.eps)?;
    let mut out = Matrix::zeros(vprime.rows(), vprime.cols());
    for j in 0..vprime.cols() {
        let n = norms.get(j);
        let hat: Vec<f64> = vprime.column(j).iter().map(|x| x / n).collect();
        let radial = dot(&hat, &upstream.column(j));
        let col: Vec<f64> = hat.iter().map(|h| -(m.get(j) / n) * h * radial).collect();
        out.set_column(j, &col);
    }
    Ok(out)
}

/// `∂L/∂W'` for a plain weight under `target`, via a one-leaf tape.
pub fn weight_gradient(weight: &Matrix, x: &Matrix, target: &LossTarget) -> Result<Matrix> {
    let mut tape = Tape::new();
    let w = tape.leaf("W", weight.clone())?;
    let xn = tape.constant(x.clone());
    let pred = tape.matmul(w, xn)?;
    let loss = target.attach(&mut tape, pred)?;
    let mut grads = tape.backward(loss)?.into_params();
    Ok(grads.remove("W").expect("registered leaf"))
}

/// Magnitude gradient of a single column: `g · v / ‖v‖`.
pub fn magnitude_grad(upstream: &[f64], v: &[f64]) -> f64 {
    dot(upstream, v) / norm(v)
}

/// Both sides of `g·v/‖v‖ = ‖g‖ cos(g, v)` for one column at `Δv = 0`.
pub fn grad_m_identity_check(v: &[f64], upstream: &[f64]) -> Result<(f64, f64)> {
    if v.len() != upstream.len() {
        return Err(crate::tensor::TensorError::LengthMismatch {
            xs: v.len(),
            ys: upstream.len(),
        }
        .into());
    }
    if norm(v) == 0.0 {
        return Err(AdapterError::ZeroVector("grad_m_identity_check (v)"));
    }
    if norm(upstream) == 0.0 {
        return Err(AdapterError::ZeroVector("grad_m_identity_check (upstream)"));
    }
    let lhs = magnitude_grad(upstream, v);
    let rhs = norm(upstream) * column_cosine(upstream, v, DEFAULT_EPS);
    Ok((lhs, rhs))
}

/// For two equal-norm upstream gradients where `g1` is more aligned with `v`
/// than `g2`, reports whether `|∂m(g1)| > |∂m(g2)|`.
pub fn scenario_ordering_check(v: &[f64], g1: &[f64], g2: &[f64]) -> Result<bool> {
    if norm(v) == 0.0 {
        return Err(AdapterError::ZeroVector("scenario_ordering_check (v)"));
    }
    let (n1, n2) = (norm(g1), norm(g2));
    if (n1 - n2).abs() > 1e-9 * n1.max(n2) {
        return Err(AdapterError::Precondition(format!("gradient norms differ: {n1} vs {n2}")));
    }
    let c1 = column_cosine(g1, v, DEFAULT_EPS).abs();
    let c2 = column_cosine(g2, v, DEFAULT_EPS).abs();
    if c1 <= c2 {
        return Err(AdapterError::Precondition(format!(
            "|cos(g1, v)| = {c1} must exceed |cos(g2, v)| = {c2}"
        )));
    }
    Ok(magnitude_grad(g1, v).abs() > magnitude_grad(g2, v).abs())
}

/// Two gradients of norm `scale` whose cosines with `v` are `cos1` and
/// `cos2`, sharing one random direction orthogonal to `v`.
pub fn equal_norm_pair(
    v: &[f64],
    cos1: f64,
    cos2: f64,
    scale: f64,
    rng: &mut impl rand::Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let nv = norm(v);
    if nv == 0.0 {
        return Err(AdapterError::ZeroVector("equal_norm_pair (v)"));
    }
    if v.len() < 2 || ![cos1, cos2].iter().all(|c| (-1.0..=1.0).contains(c)) {
        return Err(AdapterError::Precondition(
            "need at least 2 dimensions and cosines in [-1, 1]".into(),
        ));
    }
    let hat: Vec<f64> = v.iter().map(|x| x / nv).collect();
    let mut u = vec![0.0; v.len()];
    let mut nu = 0.0;
    while nu < 1e-3 {
        let r: Vec<f64> = (0..v.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let along = dot(&r, &hat);
        u = r.iter().zip(&hat).map(|(ri, hi)| ri - along * hi).collect();
        nu = norm(&u);
    }
    u.iter_mut().for_each(|x| *x /= nu);
    let make = |c: f64| {
        let s = (1.0 - c * c).max(0.0).sqrt();
        hat.iter().zip(&u).map(|(h, o)| scale * (c * h + s * o)).collect()
    };
    Ok((make(cos1), make(cos2)))
}
