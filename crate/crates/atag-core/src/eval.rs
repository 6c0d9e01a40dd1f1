//! Proposal and detection metrics: temporal IoU, AR@AN, AUC, and mAP.

use std::collections::BTreeMap;

use crate::data::Instance;
use crate::error::{CoreError, Result};
use crate::labels::interval_iou;
use crate::postproc::{compare_proposals, Proposal};

/// Temporal IoU of two `(start, end)` intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if a.0 >= a.1 || b.0 >= b.1 {
        return Err(CoreError::config(format!(
            "degenerate interval: ({}, {}) vs ({}, {})",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(interval_iou(a, b))
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    pub an_values: Vec<usize>,
    pub map_thresholds: Vec<f64>,
}

fn threshold_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + step * i as f64).collect()
}

impl EvalConfig {
    /// tIoU grid 0.5:0.05:0.95, AN grid 1..=100.
    pub fn activitynet_like() -> Self {
        Self {
            tiou_thresholds: threshold_grid(0.5, 0.95, 0.05),
            an_values: (1..=100).collect(),
            map_thresholds: threshold_grid(0.5, 0.95, 0.05),
        }
    }

    /// tIoU grid 0.5:0.05:1.0.
    pub fn thumos_like() -> Self {
        Self {
            tiou_thresholds: threshold_grid(0.5, 1.0, 0.05),
            an_values: (1..=100).collect(),
            map_thresholds: threshold_grid(0.3, 0.7, 0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for grid in [&self.tiou_thresholds, &self.map_thresholds] {
            if grid.is_empty() {
                return Err(CoreError::config("empty threshold list"));
            }
            for w in grid.windows(2) {
                if w[1] <= w[0] {
                    return Err(CoreError::config("thresholds must be strictly increasing"));
                }
            }
            if grid[0] <= 0.0 || *grid.last().unwrap() > 1.0 {
                return Err(CoreError::config("thresholds must lie in (0, 1]"));
            }
        }
        if self.an_values.is_empty() || self.an_values.contains(&0) {
            return Err(CoreError::config("AN values must be positive"));
        }
        Ok(())
    }
}

/// One video's proposals (any order) and ground-truth instances.
#[derive(Debug, Clone, Default)]
pub struct VideoEval {
    pub proposals: Vec<Proposal>,
    pub gts: Vec<Instance>,
}

/// Maximum one-to-one matching size between ground truths and proposals,
/// with an edge wherever tIoU >= threshold (Kuhn's augmenting paths).
fn max_matching(gts: &[Instance], props: &[Proposal], threshold: f64) -> usize {
    let edges: Vec<Vec<usize>> = gts
        .iter()
        .map(|g| {
            props
                .iter()
                .enumerate()
                .filter(|(_, p)| interval_iou((g.start, g.end), (p.t_s, p.t_e)) >= threshold)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let mut prop_owner = vec![usize::MAX; props.len()];
    let mut matched = 0;
    for g in 0..gts.len() {
        let mut seen = vec![false; props.len()];
        if augment(g, &edges, &mut prop_owner, &mut seen) {
            matched += 1;
        }
    }
    matched
}

fn augment(g: usize, edges: &[Vec<usize>], owner: &mut [usize], seen: &mut [bool]) -> bool {
    for &p in &edges[g] {
        if seen[p] {
            continue;
        }
        seen[p] = true;
        if owner[p] == usize::MAX || augment(owner[p], edges, owner, seen) {
            owner[p] = g;
            return true;
        }
    }
    false
}

fn top_an(v: &VideoEval, an: usize) -> Vec<Proposal> {
    let mut props = v.proposals.clone();
    props.sort_by(compare_proposals);
    props.truncate(an);
    props
}

/// Average recall at AN proposals per video, in percent. Recall is
/// dataset-level (summed matches over summed ground truths) per threshold,
/// then averaged over thresholds. Videos without ground truth are ignored.
pub fn ar_at_an(videos: &[VideoEval], an: usize, thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(CoreError::config("empty threshold list"));
    }
    let total_gt: usize = videos.iter().map(|v| v.gts.len()).sum();
    if total_gt == 0 {
        return Err(CoreError::config("no ground-truth instances to evaluate"));
    }
    let kept: Vec<Vec<Proposal>> = videos.iter().map(|v| top_an(v, an)).collect();
    let mut sum = 0.0;
    for &thr in thresholds {
        let matched: usize = videos
            .iter()
            .zip(&kept)
            .map(|(v, k)| max_matching(&v.gts, k, thr))
            .sum();
        sum += matched as f64 / total_gt as f64;
    }
    Ok(100.0 * sum / thresholds.len() as f64)
}

/// The full AR-vs-AN curve for the configured AN grid, in percent.
pub fn ar_curve(videos: &[VideoEval], cfg: &EvalConfig) -> Result<Vec<(usize, f64)>> {
    cfg.an_values
        .iter()
        .map(|&an| Ok((an, ar_at_an(videos, an, &cfg.tiou_thresholds)?)))
        .collect()
}

/// Normalized trapezoidal area under the AR-vs-AN curve, in percent of the
/// maximum attainable area.
pub fn auc(videos: &[VideoEval], cfg: &EvalConfig) -> Result<f64> {
    let curve = ar_curve(videos, cfg)?;
    if curve.len() < 2 {
        return Ok(curve.first().map_or(0.0, |&(_, ar)| ar));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((a0, r0), (a1, r1)) = (w[0], w[1]);
        area += (r0 + r1) / 2.0 * (a1 - a0) as f64;
    }
    let extent = (curve.last().unwrap().0 - curve[0].0) as f64;
    Ok(area / extent)
}

/// A class-labeled detection for mAP.
#[derive(Debug, Clone)]
pub struct Detection {
    pub video_id: String,
    pub class: String,
    pub score: f64,
    pub t_s: f64,
    pub t_e: f64,
}

/// A class-labeled ground-truth instance for mAP.
#[derive(Debug, Clone)]
pub struct ClassInstance {
    pub video_id: String,
    pub class: String,
    pub t_s: f64,
    pub t_e: f64,
}

/// All-point interpolated average precision for one class at one threshold.
/// `dets` sorted by score descending; each detection greedily matches the
/// best still-unmatched ground truth of its video.
fn average_precision(dets: &[&Detection], gts: &[&ClassInstance], threshold: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for det in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.video_id != det.video_id {
                continue;
            }
            let iou = interval_iou((g.t_s, g.t_e), (det.t_s, det.t_e));
            if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // precision envelope over the PR curve, all-point interpolation
    let mut cum_tp = 0usize;
    let mut points = Vec::with_capacity(tp.len());
    for (i, &hit) in tp.iter().enumerate() {
        if hit {
            cum_tp += 1;
        }
        let recall = cum_tp as f64 / gts.len() as f64;
        let precision = cum_tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let envelope = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    ap
}

/// Per-threshold mAP in percent, plus the average over thresholds. Classes
/// are the union of ground-truth and detection classes; a detection class
/// absent from the ground truth contributes AP 0 (its detections are all
/// false positives).
pub fn map_detection(
    dets: &[Detection],
    gts: &[ClassInstance],
    thresholds: &[f64],
) -> Result<(BTreeMap<String, f64>, f64)> {
    if thresholds.is_empty() {
        return Err(CoreError::config("empty threshold list"));
    }
    if gts.is_empty() {
        return Err(CoreError::config("no ground-truth instances to evaluate"));
    }
    let mut classes: Vec<&str> = gts
        .iter()
        .map(|g| g.class.as_str())
        .chain(dets.iter().map(|d| d.class.as_str()))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_threshold = BTreeMap::new();
    let mut total = 0.0;
    for &thr in thresholds {
        let mut sum_ap = 0.0;
        for class in &classes {
            let mut cd: Vec<&Detection> = dets.iter().filter(|d| d.class == *class).collect();
            cd.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.t_s.partial_cmp(&b.t_s).unwrap_or(std::cmp::Ordering::Equal))
                    .then(a.t_e.partial_cmp(&b.t_e).unwrap_or(std::cmp::Ordering::Equal))
            });
            let cg: Vec<&ClassInstance> = gts.iter().filter(|g| g.class == *class).collect();
            sum_ap += average_precision(&cd, &cg, thr);
        }
        let map = 100.0 * sum_ap / classes.len() as f64;
        per_threshold.insert(format!("{thr:.2}"), map);
        total += map;
    }
    Ok((per_threshold, total / thresholds.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(t_s: f64, t_e: f64, score: f64) -> Proposal {
        Proposal {
            t_s,
            t_e,
            p_f: score,
            p_s: score,
            p_e: 1.0,
            p_cc: 1.0,
            p_cr: 1.0,
        }
    }

    #[test]
    fn tiou_values() {
        assert_eq!(tiou((0.0, 10.0), (0.0, 10.0)).unwrap(), 1.0);
        assert!((tiou((0.0, 10.0), (5.0, 15.0)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(tiou((0.0, 10.0), (20.0, 30.0)).unwrap(), 0.0);
        assert!(tiou((5.0, 5.0), (0.0, 1.0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::activitynet_like().validate().is_ok());
        assert!(EvalConfig::thumos_like().validate().is_ok());
        assert_eq!(EvalConfig::activitynet_like().tiou_thresholds.len(), 10);
        assert_eq!(EvalConfig::thumos_like().tiou_thresholds.len(), 11);
        let mut bad = EvalConfig::activitynet_like();
        bad.tiou_thresholds = vec![0.5, 0.5];
        assert!(bad.validate().is_err());
        bad.tiou_thresholds = vec![0.0, 0.5];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn perfect_top1_gives_full_recall() {
        let videos = vec![VideoEval {
            proposals: vec![prop(0.0, 10.0, 0.9)],
            gts: vec![Instance::new(0.0, 10.0)],
        }];
        let cfg = EvalConfig::activitynet_like();
        assert_eq!(ar_at_an(&videos, 1, &cfg.tiou_thresholds).unwrap(), 100.0);
        assert_eq!(auc(&videos, &cfg).unwrap(), 100.0);
    }

    #[test]
    fn no_proposals_gives_zero() {
        let videos = vec![VideoEval {
            proposals: vec![],
            gts: vec![Instance::new(0.0, 10.0)],
        }];
        let cfg = EvalConfig::activitynet_like();
        assert_eq!(ar_at_an(&videos, 100, &cfg.tiou_thresholds).unwrap(), 0.0);
        assert_eq!(auc(&videos, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let videos = vec![VideoEval {
            proposals: vec![prop(0.0, 10.0, 0.9)],
            gts: vec![],
        }];
        assert!(ar_at_an(&videos, 1, &[0.5]).is_err());
    }

    #[test]
    fn one_to_one_matching_prevents_double_counting() {
        // one good proposal cannot cover two ground truths
        let videos = vec![VideoEval {
            proposals: vec![prop(0.0, 10.0, 0.9)],
            gts: vec![Instance::new(0.0, 10.0), Instance::new(0.5, 10.5)],
        }];
        let ar = ar_at_an(&videos, 10, &[0.5]).unwrap();
        assert_eq!(ar, 50.0);
    }

    #[test]
    fn maximum_matching_beats_greedy_assignment() {
        // proposal A overlaps both gts, proposal B only the first; maximum
        // matching still covers both by giving A to the second
        let videos = vec![VideoEval {
            proposals: vec![prop(0.0, 12.0, 0.9), prop(0.0, 8.0, 0.8)],
            gts: vec![Instance::new(0.0, 10.0), Instance::new(4.0, 12.0)],
        }];
        let ar = ar_at_an(&videos, 10, &[0.5]).unwrap();
        assert_eq!(ar, 100.0);
    }

    #[test]
    fn ar_is_monotone_in_an() {
        let videos = vec![VideoEval {
            proposals: vec![
                prop(50.0, 60.0, 0.9), // wrong but highest scored
                prop(0.0, 10.0, 0.5),
                prop(20.0, 30.0, 0.4),
            ],
            gts: vec![Instance::new(0.0, 10.0), Instance::new(20.0, 30.0)],
        }];
        let thr = [0.5];
        let mut prev = 0.0;
        for an in 1..=5 {
            let ar = ar_at_an(&videos, an, &thr).unwrap();
            assert!(ar + 1e-12 >= prev);
            prev = ar;
        }
        assert_eq!(prev, 100.0);
    }

    #[test]
    fn dataset_level_aggregation_weights_by_gt_count() {
        // video 1: 3 gts all matched; video 2: 1 gt unmatched
        let videos = vec![
            VideoEval {
                proposals: vec![
                    prop(0.0, 10.0, 0.9),
                    prop(20.0, 30.0, 0.8),
                    prop(40.0, 50.0, 0.7),
                ],
                gts: vec![
                    Instance::new(0.0, 10.0),
                    Instance::new(20.0, 30.0),
                    Instance::new(40.0, 50.0),
                ],
            },
            VideoEval {
                proposals: vec![prop(90.0, 95.0, 0.9)],
                gts: vec![Instance::new(0.0, 10.0)],
            },
        ];
        // dataset-level: 3/4 matched, not the per-video mean (1+0)/2
        assert_eq!(ar_at_an(&videos, 10, &[0.5]).unwrap(), 75.0);
    }

    #[test]
    fn map_perfect_detections() {
        let gts = vec![ClassInstance {
            video_id: "v".into(),
            class: "jump".into(),
            t_s: 0.0,
            t_e: 10.0,
        }];
        let dets = vec![Detection {
            video_id: "v".into(),
            class: "jump".into(),
            score: 0.9,
            t_s: 0.0,
            t_e: 10.0,
        }];
        let (per, avg) = map_detection(&dets, &gts, &[0.5, 0.75, 0.95]).unwrap();
        assert_eq!(avg, 100.0);
        assert!(per.values().all(|&v| v == 100.0));
    }

    #[test]
    fn map_order_dependence_of_fp() {
        let gts = vec![ClassInstance {
            video_id: "v".into(),
            class: "a".into(),
            t_s: 0.0,
            t_e: 10.0,
        }];
        let tp = |score| Detection {
            video_id: "v".into(),
            class: "a".into(),
            score,
            t_s: 0.0,
            t_e: 10.0,
        };
        let fp = |score| Detection {
            video_id: "v".into(),
            class: "a".into(),
            score,
            t_s: 50.0,
            t_e: 60.0,
        };
        // TP first: AP 1.0
        let (_, avg) = map_detection(&[tp(0.9), fp(0.5)], &gts, &[0.5]).unwrap();
        assert_eq!(avg, 100.0);
        // FP first: AP 0.5
        let (_, avg) = map_detection(&[tp(0.5), fp(0.9)], &gts, &[0.5]).unwrap();
        assert_eq!(avg, 50.0);
    }

    #[test]
    fn unknown_detection_class_lowers_map() {
        let gts = vec![ClassInstance {
            video_id: "v".into(),
            class: "a".into(),
            t_s: 0.0,
            t_e: 10.0,
        }];
        let dets = vec![
            Detection {
                video_id: "v".into(),
                class: "a".into(),
                score: 0.9,
                t_s: 0.0,
                t_e: 10.0,
            },
            Detection {
                video_id: "v".into(),
                class: "mystery".into(),
                score: 0.8,
                t_s: 0.0,
                t_e: 10.0,
            },
        ];
        let (_, avg) = map_detection(&dets, &gts, &[0.5]).unwrap();
        // the unknown class contributes AP 0, halving the mean
        assert_eq!(avg, 50.0);
    }

    #[test]
    fn map_empty_detections_is_zero() {
        let gts = vec![ClassInstance {
            video_id: "v".into(),
            class: "a".into(),
            t_s: 0.0,
            t_e: 10.0,
        }];
        let (_, avg) = map_detection(&[], &gts, &[0.5]).unwrap();
        assert_eq!(avg, 0.0);
        assert!(map_detection(&[], &[], &[0.5]).is_err());
    }
}
