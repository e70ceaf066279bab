//! Box decoding and per-class non-maximum suppression.

use std::cmp::Ordering;

use crate::autograd::sigmoid;
use crate::boxes::BoxCorners;
use crate::detector::targets::location_center;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// 1-based class.
    pub class: usize,
    pub score: f64,
    pub bbox: BoxCorners,
    pub centerness: Option<f64>,
    /// Row-major grid index the box was decoded from.
    pub location: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    pub stride: usize,
    pub score_thresh: f64,
    pub iou_thresh: f64,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            stride: 4,
            score_thresh: 0.05,
            iou_thresh: 0.6,
            max_detections: 100,
        }
    }
}

/// Score descending, then grid location, then class.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.location.cmp(&b.location))
        .then(a.class.cmp(&b.class))
}

/// Greedy per-class suppression of boxes overlapping a higher-ranked one by
/// more than `iou_thresh`. Output is in [`detection_order`].
pub fn nms(mut candidates: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    candidates.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in candidates {
        if kept
            .iter()
            .all(|k| k.class != d.class || k.bbox.iou(&d.bbox) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Decodes raw head maps (class logits N×K×H×W, box distances N×4×H×W in grid
/// units, center-ness logits N×1×H×W) into per-image detections. The ranking
/// score is `sigmoid(class) · sigmoid(centerness)`.
pub fn decode_and_nms(
    class_logits: &Tensor,
    boxes: &Tensor,
    centerness: &Tensor,
    params: &DecodeParams,
) -> Result<Vec<Vec<Detection>>> {
    let s = class_logits.shape();
    let (bs, cs) = (boxes.shape(), centerness.shape());
    if (bs.n, bs.c, bs.h, bs.w) != (s.n, 4, s.h, s.w) || (cs.n, cs.c, cs.h, cs.w) != (s.n, 1, s.h, s.w) {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: s,
            rhs: bs,
        });
    }
    let mut out = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let mut cands = Vec::new();
        for gy in 0..s.h {
            for gx in 0..s.w {
                let ctr = sigmoid(centerness.get(n, 0, gy, gx));
                let ltrb = [0, 1, 2, 3].map(|j| boxes.get(n, j, gy, gx));
                let (px, py) = location_center(gx, gy, params.stride);
                let bbox = BoxCorners::from_ltrb(px, py, ltrb, params.stride as f64);
                for k in 0..s.c {
                    let score = sigmoid(class_logits.get(n, k, gy, gx)) * ctr;
                    if score > params.score_thresh && score.is_finite() {
                        cands.push(Detection {
                            class: k + 1,
                            score,
                            bbox,
                            centerness: Some(ctr),
                            location: gy * s.w + gx,
                        });
                    }
                }
            }
        }
        let mut kept = nms(cands, params.iou_thresh);
        kept.truncate(params.max_detections);
        out.push(kept);
    }
    Ok(out)
}
