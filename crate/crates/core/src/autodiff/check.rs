//! Central finite differences and analytic-vs-numeric gradient comparison.

use std::fmt;

use super::{AutodiffError, NodeId, ParamSet, Tape};

/// Absolute error below which an entry always passes.
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_abs_err: f64,
    /// Largest `|a - n| / max(|a|, |n|)` among entries whose absolute error
    /// exceeds the floor.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub abs_floor: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |acc, p| acc.max(p.max_rel_err))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let rel = if p.max_abs_err <= self.abs_floor {
                format!("rel n/a (abs <= {:.0e})", self.abs_floor)
            } else {
                format!("rel {:.3e}", p.max_rel_err)
            };
            writeln!(
                f,
                "  {:<12} abs {:.3e}  {rel}  {}",
                p.name,
                p.max_abs_err,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Central differences of `loss` at `params`, with per-entry step
/// `h * max(1, |θ|)`.
pub fn finite_differences<E>(
    mut loss: impl FnMut(&ParamSet) -> Result<f64, E>,
    params: &ParamSet,
    h: f64,
) -> Result<ParamSet, E> {
    let mut work = params.clone();
    let mut out = ParamSet::new();
    for (name, base) in params {
        let mut grad = base.clone();
        for idx in 0..base.len() {
            let theta = base.data()[idx];
            let step = h * theta.abs().max(1.0);
            work.get_mut(name).expect("param present").data_mut()[idx] = theta + step;
            let plus = loss(&work)?;
            work.get_mut(name).expect("param present").data_mut()[idx] = theta - step;
            let minus = loss(&work)?;
            work.get_mut(name).expect("param present").data_mut()[idx] = theta;
            grad.data_mut()[idx] = (plus - minus) / (2.0 * step);
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

/// Compares two gradient sets entry by entry. Names present in `analytic`
/// but missing from `numeric` fail.
pub fn compare_grads(analytic: &ParamSet, numeric: &ParamSet, tol: f64, abs_floor: f64) -> GradCheckReport {
    let params = analytic
        .iter()
        .map(|(name, a)| {
            let Some(n) = numeric.get(name).filter(|n| n.shape() == a.shape()) else {
                return ParamCheck {
                    name: name.clone(),
                    max_abs_err: f64::INFINITY,
                    max_rel_err: f64::INFINITY,
                    passed: false,
                };
            };
            let mut max_abs: f64 = 0.0;
            let mut max_rel: f64 = 0.0;
            for (x, y) in a.data().iter().zip(n.data()) {
                let abs = (x - y).abs();
                max_abs = max_abs.max(abs);
                if abs > abs_floor {
                    max_rel = max_rel.max(abs / x.abs().max(y.abs()));
                }
            }
            ParamCheck {
                name: name.clone(),
                max_abs_err: max_abs,
                max_rel_err: max_rel,
                passed: max_rel <= tol,
            }
        })
        .collect();
    GradCheckReport { tol, abs_floor, params }
}

/// Builds the tape at `params`, runs backward, and checks every leaf against
/// central finite differences of the same builder's loss value.
pub fn grad_check<E: From<AutodiffError>>(
    build: impl Fn(&ParamSet) -> Result<(Tape, NodeId), E>,
    params: &ParamSet,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E> {
    assert!(h > 0.0 && tol > 0.0, "h and tol must be positive");
    let (tape, loss) = build(params)?;
    let analytic = tape.backward(loss)?.into_params();
    let numeric = finite_differences(
        |p| {
            let (t, l) = build(p)?;
            Ok::<_, E>(t.value(l).get(0, 0))
        },
        params,
        h,
    )?;
    Ok(compare_grads(&analytic, &numeric, tol, ABS_FLOOR))
}
