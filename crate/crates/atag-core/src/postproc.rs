//! Inference post-processing: dense proposal enumeration, score fusion,
//! and NMS / Soft-NMS suppression.

use std::cmp::Ordering;

use crate::error::{CoreError, Result};
use crate::labels::interval_iou;
use crate::model::ScoreMaps;

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    /// Boundaries in snippet units.
    pub t_s: f64,
    pub t_e: f64,
    /// Fused score; equals the component product at creation but may be
    /// decayed by Soft-NMS afterwards.
    pub p_f: f64,
    pub p_s: f64,
    pub p_e: f64,
    pub p_cc: f64,
    pub p_cr: f64,
}

impl Proposal {
    pub fn tiou(&self, other: &Proposal) -> f64 {
        interval_iou((self.t_s, self.t_e), (other.t_s, other.t_e))
    }
}

pub fn fuse_scores(p_s: f64, p_e: f64, p_cc: f64, p_cr: f64) -> f64 {
    p_s * p_e * p_cc * p_cr
}

/// Deterministic ordering: score descending, then earlier start, then
/// earlier end.
pub fn compare_proposals(a: &Proposal, b: &Proposal) -> Ordering {
    b.p_f
        .partial_cmp(&a.p_f)
        .unwrap_or(Ordering::Equal)
        .then(a.t_s.partial_cmp(&b.t_s).unwrap_or(Ordering::Equal))
        .then(a.t_e.partial_cmp(&b.t_e).unwrap_or(Ordering::Equal))
}

/// One proposal per valid duration/start cell: span `[j, j + i]` for
/// duration `i`, with the end probability read at the last snippet index.
pub fn enumerate_proposals(maps: &ScoreMaps) -> Vec<Proposal> {
    let (t, d) = (maps.t, maps.d);
    let mut out = Vec::new();
    for di in 0..d {
        for j in 0..t {
            let dur = di + 1;
            if j + dur > t {
                continue;
            }
            let p_s = maps.start[j];
            let p_e = maps.end[(j + dur).min(t - 1)];
            let p_cc = maps.cc[di * t + j];
            let p_cr = maps.cr[di * t + j];
            out.push(Proposal {
                t_s: j as f64,
                t_e: (j + dur) as f64,
                p_f: fuse_scores(p_s, p_e, p_cc, p_cr),
                p_s,
                p_e,
                p_cc,
                p_cr,
            });
        }
    }
    out.sort_by(compare_proposals);
    out
}

/// Greedy hard suppression: walking in score order, drop any proposal whose
/// tIoU with an already kept one exceeds the threshold.
pub fn nms(props: &[Proposal], iou_threshold: f64, max_out: usize) -> Result<Vec<Proposal>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(CoreError::config(format!(
            "NMS threshold {iou_threshold} must be in (0, 1]"
        )));
    }
    let mut sorted = props.to_vec();
    sorted.sort_by(compare_proposals);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept.len() >= max_out {
            break;
        }
        if kept.iter().all(|k| k.tiou(&p) <= iou_threshold) {
            kept.push(p);
        }
    }
    Ok(kept)
}

/// Gaussian-decay Soft-NMS: iteratively select the max-score proposal and
/// multiply every remaining score by `exp(-tIoU^2 / sigma)`. Stops when the
/// best remaining score falls below `score_floor` or `max_out` proposals
/// are selected. Boundaries are never changed.
pub fn soft_nms(
    props: &[Proposal],
    sigma: f64,
    score_floor: f64,
    max_out: usize,
) -> Result<Vec<Proposal>> {
    if sigma <= 0.0 {
        return Err(CoreError::config(format!("sigma {sigma} must be positive")));
    }
    let mut remaining = props.to_vec();
    let mut out: Vec<Proposal> = Vec::new();
    while out.len() < max_out && !remaining.is_empty() {
        let best = remaining
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| compare_proposals(a, b))
            .map(|(i, _)| i)
            .expect("non-empty");
        let chosen = remaining.swap_remove(best);
        if chosen.p_f < score_floor {
            break;
        }
        for p in &mut remaining {
            let iou = chosen.tiou(p);
            p.p_f *= (-(iou * iou) / sigma).exp();
        }
        out.push(chosen);
    }
    out.sort_by(compare_proposals);
    Ok(out)
}
