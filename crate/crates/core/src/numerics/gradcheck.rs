//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    /// `(param, element)` of the worst mismatch.
    pub worst: Option<(usize, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Gradients of `f` with respect to every element of `params`, from the tape.
pub fn analytic_gradient<F>(params: &[Tensor], f: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::default();
    let vars = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect())
}

/// `(f(x + h) - f(x - h)) / 2h` for every element, perturbing one at a time.
pub fn numeric_gradient<F>(params: &mut [Tensor], h: f64, f: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::default();
        let vars = params.iter().map(|p| tape.leaf(p)).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "grad_check objective",
            });
        }
        Ok(v)
    };
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let x = params[p].data()[j];
            params[p].data_mut()[j] = x + h;
            let plus = eval(params);
            params[p].data_mut()[j] = x - h;
            let minus = eval(params);
            params[p].data_mut()[j] = x;
            *gj = (plus? - minus?) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        per_param: Vec::with_capacity(analytic.len()),
        worst: None,
    };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let mut worst = 0.0f64;
        for (j, (&aj, &nj)) in a.iter().zip(n).enumerate() {
            let e = relative_error(aj, nj);
            worst = worst.max(e);
            if report.worst.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((p, j));
            }
        }
        report.per_param.push(worst);
    }
    report
}

/// Compares tape gradients of the scalar `f` against central differences
/// with step `h`; returns the maximum relative error.
pub fn grad_check<F>(params: &mut [Tensor], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(params, &mut f)?;
    let numeric = numeric_gradient(params, h, &mut f)?;
    Ok(compare(&analytic, &numeric))
}
