//! Classification, box regression and auxiliary losses for dense heads.
//!
//! Per-location loss functions come with analytic derivatives; [`total_loss`]
//! sums them over a batch and records the result on the tape as a single
//! fused scalar node.

use crate::autograd::{sigmoid, Tape, Var};
use crate::boxes::BoxCorners;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Clamp for probabilities fed to `ln`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClsLoss {
    Focal {
        alpha: f64,
        gamma: f64,
    },
    /// One-vs-all binary cross-entropy.
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegLoss {
    Iou,
    Giou,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxLoss {
    /// Binary cross-entropy against the center-ness target.
    CenternessBce,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub cls: ClsLoss,
    pub reg: RegLoss,
    pub aux: Vec<(AuxLoss, f64)>,
    /// Weight of the classification term.
    pub cls_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            cls: ClsLoss::Focal {
                alpha: 0.25,
                gamma: 2.0,
            },
            reg: RegLoss::Iou,
            aux: vec![(AuxLoss::CenternessBce, 1.0)],
            cls_weight: 1.0,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cls_weight > 0.0 && self.cls_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "classification weight {} must be positive",
                self.cls_weight
            )));
        }
        if let Some((_, w)) = self.aux.iter().find(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "auxiliary weight {w} must be non-negative"
            )));
        }
        if let ClsLoss::Focal { alpha, gamma } = self.cls {
            if !(0.0..=1.0).contains(&alpha) || !(gamma >= 0.0 && gamma.is_finite()) {
                return Err(Error::InvalidArgument(format!("focal alpha {alpha} / gamma {gamma}")));
            }
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (c, c != p)
}

/// One one-vs-all focal term `-α_t (1 - p_t)^γ ln p_t` for probability `p`
/// of the positive label.
pub fn focal_term(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let (p, _) = clamp_prob(p);
    let (pt, at) = if positive { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -at * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Focal loss summed over classes; `label` is 0 for background or `k` for
/// class index `k - 1`.
pub fn focal_loss(probs: &[f64], label: usize, alpha: f64, gamma: f64) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| focal_term(p, label == k + 1, alpha, gamma))
        .sum()
}

/// One-vs-all binary cross-entropy summed over classes.
pub fn cross_entropy_loss(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let (p, _) = clamp_prob(p);
            if label == k + 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Classification loss of one logit and its derivative w.r.t. the logit.
fn cls_term(kind: ClsLoss, logit: f64, positive: bool) -> (f64, f64, bool) {
    let (alpha_t, gamma) = match kind {
        ClsLoss::Focal { alpha, gamma } => (if positive { alpha } else { 1.0 - alpha }, gamma),
        ClsLoss::CrossEntropy => (1.0, 0.0),
    };
    let raw = sigmoid(logit);
    let (p, clamped) = clamp_prob(raw);
    let pt = if positive { p } else { 1.0 - p };
    let q = 1.0 - pt;
    let value = -alpha_t * q.powf(gamma) * pt.ln();
    if clamped {
        return (value, 0.0, true);
    }
    let d_pt = if gamma == 0.0 {
        -alpha_t / pt
    } else {
        -alpha_t * (-gamma * q.powf(gamma - 1.0) * pt.ln() + q.powf(gamma) / pt)
    };
    let sign = if positive { 1.0 } else { -1.0 };
    (value, d_pt * sign * raw * (1.0 - raw), false)
}

/// Binary cross-entropy of a logit against a soft target, with derivative.
fn bce_term(logit: f64, target: f64) -> (f64, f64, bool) {
    let raw = sigmoid(logit);
    let (p, clamped) = clamp_prob(raw);
    let value = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    let grad = if clamped { 0.0 } else { raw - target };
    (value, grad, clamped)
}

/// `sqrt(min(l,r)/max(l,r) · min(t,b)/max(t,b))`, or `None` when any distance
/// is non-positive (the location is not inside the box).
pub fn centerness_target(l: f64, t: f64, r: f64, b: f64) -> Option<f64> {
    if l <= 0.0 || t <= 0.0 || r <= 0.0 || b <= 0.0 {
        return None;
    }
    Some(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

/// Overlap loss between predicted and target `(l, t, r, b)` distances from the
/// same location, with its gradient w.r.t. the prediction and a bitmask of
/// which side each min/max picked.
///
/// A prediction of zero area has IoU 0; ties pick the target side for `min`
/// and the prediction side for `max`.
pub fn ltrb_loss_with_grad(kind: RegLoss, pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4], u64) {
    let [pl, pt, pr, pb] = pred;
    let [gl, gt, gr, gb] = target;
    let less = [pl < gl, pt < gt, pr < gr, pb < gb];
    let wi = pl.min(gl) + pr.min(gr);
    let hi = pt.min(gt) + pb.min(gb);
    let inter = wi * hi;
    let area_p = (pl + pr) * (pt + pb);
    let area_g = (gl + gr) * (gt + gb);
    let union = area_p + area_g - inter;
    let bits = less.iter().enumerate().fold(0u64, |m, (i, &b)| m | (u64::from(b) << i));
    if union <= 0.0 {
        return (1.0, [0.0; 4], bits);
    }
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    let d_inter = [
        hi * ind(less[0]),
        wi * ind(less[1]),
        hi * ind(less[2]),
        wi * ind(less[3]),
    ];
    let d_area = [pt + pb, pl + pr, pt + pb, pl + pr];
    let iou = inter / union;
    let mut d_iou = [0.0; 4];
    let mut d_union = [0.0; 4];
    for i in 0..4 {
        d_union[i] = d_area[i] - d_inter[i];
        d_iou[i] = (d_inter[i] * union - inter * d_union[i]) / (union * union);
    }
    match kind {
        RegLoss::Iou => (1.0 - iou, d_iou.map(|d| -d), bits),
        RegLoss::Giou => {
            let wc = pl.max(gl) + pr.max(gr);
            let hc = pt.max(gt) + pb.max(gb);
            let hull = wc * hc;
            let d_hull = [
                hc * ind(!less[0]),
                wc * ind(!less[1]),
                hc * ind(!less[2]),
                wc * ind(!less[3]),
            ];
            let giou = iou - (hull - union) / hull;
            let mut grad = [0.0; 4];
            for i in 0..4 {
                let d = d_iou[i] + (d_union[i] * hull - union * d_hull[i]) / (hull * hull);
                grad[i] = -d;
            }
            (1.0 - giou, grad, bits)
        }
    }
}

/// `1 - IoU` between two corner-form boxes.
pub fn iou_loss(pred: &BoxCorners, target: &BoxCorners) -> f64 {
    1.0 - pred.iou(target)
}

/// `1 - GIoU` between two corner-form boxes, in `[0, 2]`.
pub fn giou_loss(pred: &BoxCorners, target: &BoxCorners) -> f64 {
    1.0 - pred.giou(target)
}

/// Dense per-location targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTargets {
    pub height: usize,
    pub width: usize,
    /// 0 = background, `k` = class `k` (1-based).
    pub labels: Vec<usize>,
    /// `(l, t, r, b)` in grid units; zeros at background locations.
    pub boxes: Vec<[f64; 4]>,
    /// Center-ness target; 0 at background locations.
    pub centerness: Vec<f64>,
}

impl DenseTargets {
    pub fn background(height: usize, width: usize) -> Self {
        let n = height * width;
        DenseTargets {
            height,
            width,
            labels: vec![0; n],
            boxes: vec![[0.0; 4]; n],
            centerness: vec![0.0; n],
        }
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&c| c > 0).count()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.height * self.width;
        if self.labels.len() != n || self.boxes.len() != n || self.centerness.len() != n {
            return Err(Error::InvalidArgument("target map sizes disagree".into()));
        }
        for i in 0..n {
            let c = self.labels[i];
            if c > num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {c} exceeds {num_classes} classes"
                )));
            }
            if c > 0 {
                let [l, t, r, b] = self.boxes[i];
                let u = self.centerness[i];
                if !(l + r > 0.0 && t + b > 0.0) || !(0.0..=1.0).contains(&u) {
                    return Err(Error::InvalidArgument(format!("malformed positive target at {i}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub aux: f64,
    pub n_pos: usize,
}

/// `L = L_reg + λ·L_cls + L_aux`.
pub fn combine_terms(reg: f64, cls: f64, aux: f64, cls_weight: f64) -> f64 {
    reg + cls_weight * cls + aux
}

/// Loss values plus gradients w.r.t. each prediction map.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLoss {
    pub terms: LossTerms,
    pub grad_cls: Vec<f64>,
    pub grad_box: Vec<f64>,
    pub grad_ctr: Vec<f64>,
    /// Hash of every branch taken by clamps and min/max comparisons.
    pub branch_bits: u64,
}

/// Evaluates the full loss on raw prediction maps: class logits N×K×H×W,
/// positive box distances N×4×H×W in grid units, center-ness logits N×1×H×W.
///
/// Classification sums over all locations; regression and auxiliary terms
/// only over positives; all three divide by `max(N_pos, 1)`.
pub fn dense_loss(
    cls_logits: &Tensor,
    boxes: &Tensor,
    centerness: &Tensor,
    targets: &[DenseTargets],
    spec: &LossSpec,
) -> Result<DenseLoss> {
    spec.validate()?;
    let sc = cls_logits.shape();
    let (n, k, h, w) = (sc.n, sc.c, sc.h, sc.w);
    if boxes.shape() != Shape::new(n, 4, h, w) {
        return Err(Error::ShapeMismatch {
            op: "dense_loss boxes",
            lhs: sc,
            rhs: boxes.shape(),
        });
    }
    if centerness.shape() != Shape::new(n, 1, h, w) {
        return Err(Error::ShapeMismatch {
            op: "dense_loss centerness",
            lhs: sc,
            rhs: centerness.shape(),
        });
    }
    if targets.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} target maps for batch of {n}",
            targets.len()
        )));
    }
    for t in targets {
        if (t.height, t.width) != (h, w) {
            return Err(Error::InvalidArgument(format!(
                "target map {}×{} vs prediction {h}×{w}",
                t.height, t.width
            )));
        }
        t.validate(k)?;
    }
    let n_pos: usize = targets.iter().map(DenseTargets::num_positive).sum();
    let norm = 1.0 / n_pos.max(1) as f64;
    let plane = h * w;
    let mut grad_cls = vec![0.0; cls_logits.data().len()];
    let mut grad_box = vec![0.0; boxes.data().len()];
    let mut grad_ctr = vec![0.0; centerness.data().len()];
    let (mut cls_sum, mut reg_sum, mut aux_sum) = (0.0, 0.0, 0.0);
    let mut bits: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |b: u64| bits = (bits ^ b).wrapping_mul(0x100_0000_01b3);

    for (b, t) in targets.iter().enumerate() {
        for loc in 0..plane {
            let label = t.labels[loc];
            for c in 0..k {
                let idx = (b * k + c) * plane + loc;
                let (v, g, clamped) = cls_term(spec.cls, cls_logits.data()[idx], label == c + 1);
                cls_sum += v;
                grad_cls[idx] = spec.cls_weight * norm * g;
                if clamped {
                    mix(idx as u64);
                }
            }
            if label == 0 {
                continue;
            }
            let pred = [0, 1, 2, 3].map(|j| boxes.data()[(b * 4 + j) * plane + loc]);
            let (v, g, side) = ltrb_loss_with_grad(spec.reg, pred, t.boxes[loc]);
            reg_sum += v;
            mix(side);
            for j in 0..4 {
                grad_box[(b * 4 + j) * plane + loc] = norm * g[j];
            }
            for &(kind, weight) in &spec.aux {
                match kind {
                    AuxLoss::CenternessBce => {
                        let idx = b * plane + loc;
                        let (v, g, clamped) = bce_term(centerness.data()[idx], t.centerness[loc]);
                        aux_sum += weight * v;
                        grad_ctr[idx] += weight * norm * g;
                        if clamped {
                            mix(!(idx as u64));
                        }
                    }
                }
            }
        }
    }
    let cls = cls_sum * norm;
    let reg = reg_sum * norm;
    let aux = aux_sum * norm;
    Ok(DenseLoss {
        terms: LossTerms {
            total: combine_terms(reg, cls, aux, spec.cls_weight),
            cls,
            reg,
            aux,
            n_pos,
        },
        grad_cls,
        grad_box,
        grad_ctr,
        branch_bits: bits,
    })
}

/// Records the total loss of the three prediction maps on `tape`.
pub fn total_loss(
    tape: &mut Tape,
    cls_logits: Var,
    boxes: Var,
    centerness: Var,
    targets: &[DenseTargets],
    spec: &LossSpec,
) -> Result<(Var, LossTerms)> {
    let out = dense_loss(
        tape.value(cls_logits),
        tape.value(boxes),
        tape.value(centerness),
        targets,
        spec,
    )?;
    tape.mix_signature(out.branch_bits);
    let var = tape.fused_scalar(
        out.terms.total,
        vec![
            (cls_logits, out.grad_cls),
            (boxes, out.grad_box),
            (centerness, out.grad_ctr),
        ],
    )?;
    Ok((var, out.terms))
}
