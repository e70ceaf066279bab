//! COCO-style average precision.

use std::collections::BTreeSet;

use crate::boxes::BoxCorners;
use crate::detector::postprocess::{detection_order, Detection};

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BoxCorners,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ApSummary {
    /// Mean over IoU thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// 101-point interpolated AP of one class at one IoU threshold, or `None` if
/// the class has no ground truth. `detections[i]` and `truth[i]` belong to
/// image `i`.
pub fn class_ap(
    detections: &[Vec<Detection>],
    truth: &[Vec<GroundTruth>],
    class: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let n_gt: usize = truth
        .iter()
        .map(|g| g.iter().filter(|t| t.class == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, d)| d.iter().filter(|d| d.class == class).map(move |d| (img, d)))
        .collect();
    ranked.sort_by(|a, b| detection_order(a.1, b.1).then(a.0.cmp(&b.0)));
    let mut used: Vec<Vec<bool>> = truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (i, (img, d)) in ranked.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in truth[*img].iter().enumerate() {
            if g.class != class || used[*img][j] {
                continue;
            }
            let iou = d.bbox.iou(&g.bbox);
            if iou >= iou_thresh && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, j));
            }
        }
        if let Some((_, j)) = best {
            used[*img][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope: best precision at any recall to the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// Mean over classes with ground truth of the per-class AP at `iou_thresh`;
/// 0 when no class has ground truth.
pub fn mean_ap(detections: &[Vec<Detection>], truth: &[Vec<GroundTruth>], iou_thresh: f64) -> f64 {
    let classes: BTreeSet<usize> = truth.iter().flatten().map(|g| g.class).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .filter_map(|&c| class_ap(detections, truth, c, iou_thresh))
        .sum();
    total / classes.len() as f64
}

pub fn evaluate_ap(detections: &[Vec<Detection>], truth: &[Vec<GroundTruth>]) -> ApSummary {
    let per: Vec<f64> = coco_thresholds()
        .iter()
        .map(|&t| mean_ap(detections, truth, t))
        .collect();
    ApSummary {
        ap: per.iter().sum::<f64>() / per.len() as f64,
        ap50: per[0],
        ap75: per[5],
    }
}
