//! Central finite-difference verification of analytic gradients.
//!
//! The checker is deliberately independent of the backward pass: it only
//! re-evaluates the forward closure at perturbed parameter values.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare the analytic gradient of `loss_fn` with central finite
/// differences `(L(p+h) - L(p-h)) / 2h` for every element of every
/// parameter.
///
/// The relative error uses a unit floor in the denominator,
/// `|a-n| / max(|a|, |n|, 1)`, so near-zero gradients are compared
/// absolutely. Intended for `S = f64`.
pub fn grad_check<S, F>(
    params: &[(String, Tensor<S>)],
    loss_fn: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<S>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = loss_fn(&tape, &vars)?;
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(CoreError::config("grad_check: loss must be scalar"));
        }
        Ok(v.data()[0].to_f64())
    };

    // analytic gradients
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = loss_fn(&tape, &vars)?;
    let grads = tape.backward(loss);

    let mut tensors: Vec<Tensor<S>> = params.iter().map(|(_, t)| t.clone()).collect();
    let hs = S::from_f64(h);
    let mut entries = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[pi]) {
            Some(g) => g.iter().map(|x| Scalar::to_f64(*x)).collect(),
            None => vec![0.0; tensors[pi].numel()],
        };
        let mut entry = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
        };
        for j in 0..tensors[pi].numel() {
            let orig = tensors[pi].data()[j];
            tensors[pi].data_mut()[j] = orig + hs;
            let lp = eval(&tensors)?;
            tensors[pi].data_mut()[j] = orig - hs;
            let lm = eval(&tensors)?;
            tensors[pi].data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            let err = (a - numeric).abs() / denom;
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_index = j;
            }
        }
        if entry.max_rel_err > max_rel_err {
            max_rel_err = entry.max_rel_err;
            worst = Some((name.clone(), entry.worst_index));
        }
        entries.push(entry);
    }
    let report = GradCheckReport {
        entries,
        max_rel_err,
        worst,
    };
    if !report.passes(tol) {
        let (name, idx) = report.worst.clone().unwrap_or_default();
        return Err(CoreError::GradCheck(format!(
            "max relative error {max_rel_err:.3e} > tol {tol:.1e} at parameter {name}[{idx}]"
        )));
    }
    Ok(report)
}
