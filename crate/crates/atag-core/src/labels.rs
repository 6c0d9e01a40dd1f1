//! Ground-truth label assignment for boundaries, actionness and the
//! boundary-matching completeness map.
//!
//! Snippet `i` occupies the interval `[i, i+1)`. The overlap ratio IoR of a
//! snippet with a labeled region uses the snippet interval length (one) as
//! denominator; a snippet is positive when its maximum IoR over instances
//! exceeds 0.5.

use crate::data::{GroundTruth, Instance};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// All training targets for one video at a given `(T, D)`.
#[derive(Debug, Clone)]
pub struct LabelSet<S: Scalar> {
    pub g_start: Tensor<S>,
    pub g_end: Tensor<S>,
    pub g_action: Tensor<S>,
    /// `D x T` max-IoU map over valid cells, zero elsewhere.
    pub completeness: Tensor<S>,
}

impl<S: Scalar> LabelSet<S> {
    pub fn build(gt: &GroundTruth, t: usize, d: usize) -> Self {
        let (g_start, g_end) = assign_boundary_labels(gt, t);
        LabelSet {
            g_start,
            g_end,
            g_action: assign_actionness_labels(gt, t),
            completeness: assign_completeness_labels(gt, t, d),
        }
    }
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// IoR of snippet `[i, i+1)` with region `[r0, r1]`.
fn snippet_ior(i: usize, r0: f64, r1: f64) -> f64 {
    interval_overlap(i as f64, (i + 1) as f64, r0, r1)
}

/// Boundary labels: positive where the max IoR with a `[t-1.5, t+1.5]`
/// start (end) region exceeds 0.5.
pub fn assign_boundary_labels<S: Scalar>(gt: &GroundTruth, t: usize) -> (Tensor<S>, Tensor<S>) {
    let half = 1.5;
    let region_labels = |pick: &dyn Fn(&Instance) -> f64| -> Tensor<S> {
        let mut out = vec![S::zero(); t];
        for (i, o) in out.iter_mut().enumerate() {
            let ior = gt
                .instances
                .iter()
                .map(|inst| {
                    let c = pick(inst);
                    snippet_ior(i, c - half, c + half)
                })
                .fold(0.0f64, f64::max);
            if ior > 0.5 {
                *o = S::one();
            }
        }
        Tensor::new(vec![t], out).expect("label shape")
    };
    (
        region_labels(&|inst| inst.start),
        region_labels(&|inst| inst.end),
    )
}

/// Actionness labels: positive where the max IoR with an instance span
/// `[t_s, t_e]` exceeds 0.5.
pub fn assign_actionness_labels<S: Scalar>(gt: &GroundTruth, t: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); t];
    for (i, o) in out.iter_mut().enumerate() {
        let ior = gt
            .instances
            .iter()
            .map(|inst| snippet_ior(i, inst.start, inst.end))
            .fold(0.0f64, f64::max);
        if ior > 0.5 {
            *o = S::one();
        }
    }
    Tensor::new(vec![t], out).expect("label shape")
}

/// Temporal IoU of two intervals given as `(start, end)`.
pub fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = interval_overlap(a.0, a.1, b.0, b.1);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `G^c[i-1][j] = max tIoU([j, j+i], instances)` for durations `i = 1..=D`,
/// zero on invalid cells (`j + i > T`).
pub fn assign_completeness_labels<S: Scalar>(gt: &GroundTruth, t: usize, d: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); d * t];
    for di in 0..d {
        let dur = di + 1;
        for j in 0..t {
            if j + dur > t {
                continue;
            }
            let iou = gt
                .instances
                .iter()
                .map(|inst| interval_iou((j as f64, (j + dur) as f64), (inst.start, inst.end)))
                .fold(0.0f64, f64::max);
            out[di * t + j] = S::from_f64(iou);
        }
    }
    Tensor::new(vec![d, t], out).expect("label shape")
}

/// `D x T` validity mask: cell `(i, j)` (duration `i+1`, start `j`) is valid
/// iff `j + i + 1 <= T`.
pub fn valid_mask<S: Scalar>(d: usize, t: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); d * t];
    for di in 0..d {
        for j in 0..t {
            if j + di + 1 <= t {
                out[di * t + j] = S::one();
            }
        }
    }
    Tensor::new(vec![d, t], out).expect("mask shape")
}
