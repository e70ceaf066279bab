//! Dense target assignment on a single feature level.

use crate::boxes::BoxCorners;
use crate::detector::data::SceneSpec;
use crate::error::{Error, Result};
use crate::losses::{centerness_target, DenseTargets};

/// Pixel coordinates of grid location `(gx, gy)`.
pub fn location_center(gx: usize, gy: usize, stride: usize) -> (f64, f64) {
    let half = (stride / 2) as f64;
    ((gx * stride) as f64 + half, (gy * stride) as f64 + half)
}

/// Every location strictly inside a ground-truth box is positive, regressing
/// its distances (in grid units) to that box's sides. A location inside
/// several boxes takes the smallest one; equal areas keep the earlier object.
pub fn assign_targets(scene: &SceneSpec, stride: usize) -> Result<DenseTargets> {
    if stride == 0 || !scene.size.is_multiple_of(stride) {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} does not divide image size {}",
            scene.size
        )));
    }
    let g = scene.size / stride;
    let mut t = DenseTargets::background(g, g);
    let s = stride as f64;
    for gy in 0..g {
        for gx in 0..g {
            let (px, py) = location_center(gx, gy, stride);
            let mut best: Option<(f64, usize, &BoxCorners)> = None;
            for o in &scene.objects {
                let b = &o.bbox;
                if b.contains(px, py) && best.is_none_or(|(area, _, _)| b.area() < area) {
                    best = Some((b.area(), o.class, b));
                }
            }
            let Some((_, class, b)) = best else { continue };
            let ltrb = [(px - b.x1) / s, (py - b.y1) / s, (b.x2 - px) / s, (b.y2 - py) / s];
            let Some(u) = centerness_target(ltrb[0], ltrb[1], ltrb[2], ltrb[3]) else {
                continue;
            };
            let i = gy * g + gx;
            t.labels[i] = class;
            t.boxes[i] = ltrb;
            t.centerness[i] = u;
        }
    }
    Ok(t)
}
