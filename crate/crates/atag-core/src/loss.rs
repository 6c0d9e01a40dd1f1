//! Multi-task training loss: actionness, start/end boundary losses and the
//! completeness classification + regression pair.

use crate::error::{CoreError, Result};
use crate::labels::LabelSet;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LossWeights {
    /// Completeness regression weight.
    pub lambda_r: f64,
    pub lambda_a: f64,
    pub lambda_s: f64,
    pub lambda_e: f64,
    /// Binarization threshold turning the continuous completeness map into
    /// classification targets.
    pub gc_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 10.0,
            lambda_a: 1.0,
            lambda_s: 1.0,
            lambda_e: 1.0,
            gc_threshold: 0.9,
        }
    }
}

/// Per-component loss values for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub completeness_cls: f64,
    pub completeness_reg: f64,
    pub actionness: f64,
    pub start: f64,
    pub end: f64,
}

/// Predicted score-map vars for one video (on the tape).
pub struct PredictionVars {
    pub actionness: Var,
    pub start: Var,
    pub end: Var,
    pub cc: Var,
    pub cr: Var,
}

/// Completeness loss: weighted binary logistic loss on binarized targets
/// plus `lambda_r` times the MSE against the continuous map, both over
/// valid cells only.
pub fn completeness_loss<S: Scalar>(
    tape: &Tape<S>,
    cc: Var,
    cr: Var,
    gc: &Tensor<S>,
    valid: &Tensor<S>,
    weights: &LossWeights,
) -> Result<(Var, f64, f64)> {
    let thr = S::from_f64(weights.gc_threshold);
    let binarized = gc.map(|x| if x > thr { S::one() } else { S::zero() });
    let l_c = tape.weighted_bl_loss(cc, &binarized, Some(valid))?;
    let l_r = tape.mse_loss(cr, gc, Some(valid))?;
    let cls = tape.value(l_c).data()[0].to_f64();
    let reg = tape.value(l_r).data()[0].to_f64();
    let total = tape.add(l_c, tape.scale(l_r, S::from_f64(weights.lambda_r)))?;
    Ok((total, cls, reg))
}

/// The multi-task objective `L = L_com + l1*L_a + l2*L_s + l3*L_e`.
///
/// Components with weight zero are still evaluated for logging but excluded
/// from the differentiated graph. A non-finite component aborts with its
/// name.
pub fn total_loss<S: Scalar>(
    tape: &Tape<S>,
    preds: &PredictionVars,
    labels: &LabelSet<S>,
    valid: &Tensor<S>,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    let (l_com, cls, reg) = completeness_loss(tape, preds.cc, preds.cr, &labels.completeness, valid, weights)?;
    let l_a = tape.weighted_bl_loss(preds.actionness, &labels.g_action, None)?;
    let l_s = tape.weighted_bl_loss(preds.start, &labels.g_start, None)?;
    let l_e = tape.weighted_bl_loss(preds.end, &labels.g_end, None)?;

    let mut parts = LossParts {
        completeness_cls: cls,
        completeness_reg: reg,
        actionness: tape.value(l_a).data()[0].to_f64(),
        start: tape.value(l_s).data()[0].to_f64(),
        end: tape.value(l_e).data()[0].to_f64(),
        ..Default::default()
    };
    for (name, v) in [
        ("completeness_cls", parts.completeness_cls),
        ("completeness_reg", parts.completeness_reg),
        ("actionness", parts.actionness),
        ("start", parts.start),
        ("end", parts.end),
    ] {
        if !v.is_finite() {
            return Err(CoreError::NonFinite(format!("loss component {name}")));
        }
    }

    let mut total = l_com;
    for (term, weight) in [
        (l_a, weights.lambda_a),
        (l_s, weights.lambda_s),
        (l_e, weights.lambda_e),
    ] {
        if weight != 0.0 {
            total = tape.add(total, tape.scale(term, S::from_f64(weight)))?;
        }
    }
    parts.total = tape.value(total).data()[0].to_f64();
    Ok((total, parts))
}
