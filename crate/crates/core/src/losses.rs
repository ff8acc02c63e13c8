//! Training objective: sigmoid focal loss for objectness and classes, CIoU
//! for box geometry, distribution focal loss for the side-offset bins.
//!
//! Every loss returns its value together with the analytic gradient w.r.t.
//! its inputs; [`total_loss`] assembles them into per-level gradient tensors
//! that plug into the tape as a single scalar op.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Labeled};
use crate::detector::{Assignment, DecodedSlot, DetectorConfig, RawPrediction};
use crate::error::{Error, Result};
use crate::math::{log_softmax, sigmoid, softmax};
use crate::tensor::Tensor;

/// Denominator guard used by CIoU.
pub const EPS: f64 = 1e-9;
/// Floor applied to log arguments in the focal loss.
pub const LOG_FLOOR: f64 = 1e-12;

/// Intersection over union of two boxes; 0 when they do not overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Forward-mode dual number carrying derivatives w.r.t. the four
/// coordinates of the predicted box.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 4],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }

    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Dual { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        Dual {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    fn sq(self) -> Self {
        self * self
    }

    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual {
            v: self.v * inv,
            d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv),
        }
    }
}

/// `1 - CIoU(pred, gt)` and its gradient w.r.t. `(xmin, ymin, xmax, ymax)`
/// of `pred`.
///
/// `CIoU = IoU - rho^2 / c^2 - alpha v`, with `v = 4/pi^2 (atan(wg/hg) -
/// atan(w/h))^2` and `alpha = v / ((1 - IoU) + v)`. `alpha` is held constant
/// when differentiating.
pub fn ciou_loss_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let x1 = Dual::var(pred.xmin, 0);
    let y1 = Dual::var(pred.ymin, 1);
    let x2 = Dual::var(pred.xmax, 2);
    let y2 = Dual::var(pred.ymax, 3);
    let c = Dual::constant;
    let (gx1, gy1, gx2, gy2) = (c(gt.xmin), c(gt.ymin), c(gt.xmax), c(gt.ymax));
    let zero = c(0.0);

    let w = x2 - x1;
    let h = y2 - y1;
    let (gw, gh) = (gx2 - gx1, gy2 - gy1);
    let iw = (x2.min(gx2) - x1.max(gx1)).max(zero);
    let ih = (y2.min(gy2) - y1.max(gy1)).max(zero);
    let inter = iw * ih;
    let union = w * h + gw * gh - inter + c(EPS);
    let iou = inter / union;

    let rho2 = ((x1 + x2 - gx1 - gx2) * c(0.5)).sq() + ((y1 + y2 - gy1 - gy2) * c(0.5)).sq();
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let c2 = cw.sq() + ch.sq() + c(EPS);

    let v = c(4.0 / (PI * PI)) * ((gw / (gh + c(EPS))).atan() - (w / (h + c(EPS))).atan()).sq();
    let alpha = v.v / ((1.0 - iou.v) + v.v + EPS);

    let loss = c(1.0) - iou + rho2 / c2 + c(alpha) * v;
    (loss.v, loss.d)
}

pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    ciou_loss_grad(pred, gt).0
}

/// Sigmoid focal loss of one logit against a target in [0, 1], with the
/// derivative w.r.t. the logit.
///
/// `-w(t) |t - p|^gamma [t log p + (1 - t) log(1 - p)]` where `p =
/// sigmoid(x)` and `w(t) = alpha t + (1 - alpha)(1 - t)`. For binary targets
/// this is `-alpha_t (1 - p_t)^gamma log p_t`; soft targets carry the
/// IoU-aware objectness.
pub fn focal_term(logit: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let w = alpha * target + (1.0 - alpha) * (1.0 - target);
    let bce = -(target * p.max(LOG_FLOOR).ln() + (1.0 - target) * (1.0 - p).max(LOG_FLOOR).ln());
    let diff = (target - p).abs();
    let modulator = if gamma == 0.0 { 1.0 } else { diff.powf(gamma) };
    let loss = w * modulator * bce;

    let dbce = p - target;
    let dmod = if gamma == 0.0 || diff == 0.0 {
        0.0
    } else {
        gamma * diff.powf(gamma - 1.0) * (p - target).signum() * p * (1.0 - p)
    };
    (loss, w * (dmod * bce + modulator * dbce))
}

/// Focal loss for rows of class logits: summed over classes, averaged over
/// rows. `targets[r]` is the positive class of row `r`, or `None` for
/// background.
pub fn focal_loss(logits: &Tensor, targets: &[Option<usize>], alpha: f64, gamma: f64) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::Shape(format!(
            "focal_loss needs [rows, classes] logits with one target per row, got {:?} and {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut grad = logits.zeros_like();
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..classes {
            let t = if targets[r] == Some(c) { 1.0 } else { 0.0 };
            let (l, g) = focal_term(logits.data()[r * classes + c], t, alpha, gamma);
            total += l;
            grad.data_mut()[r * classes + c] = g / rows as f64;
        }
    }
    Ok((total / rows as f64, grad))
}

/// Distribution focal loss of one side and its gradient w.r.t. the bin
/// logits. The target is clamped into `[0, bins - 1]`; the flag reports
/// whether clamping happened.
///
/// With `i = floor(y)`: `-((i + 1 - y) log S_i + (y - i) log S_{i+1})`.
pub fn dfl_loss(logits: &[f64], target: f64) -> (f64, Vec<f64>, bool) {
    let bins = logits.len();
    let hi = (bins - 1) as f64;
    let clamped = !(0.0..=hi).contains(&target);
    let y = target.clamp(0.0, hi);
    let i = (y.floor() as usize).min(bins - 2);
    let (wl, wr) = ((i + 1) as f64 - y, y - i as f64);
    let logp = log_softmax(logits);
    let loss = -(wl * logp[i] + wr * logp[i + 1]);
    let mut grad = softmax(logits);
    grad[i] -= wl;
    grad[i + 1] -= wr;
    (loss, grad, clamped)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_box: f64,
    pub w_cls: f64,
    pub w_dfl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_box: 7.5,
            w_cls: 0.5,
            w_dfl: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Objectness target is IoU(decoded, gt) for positives instead of 1.
    pub iou_aware_objectness: bool,
    /// Loss multiplier for GAN-composited images.
    pub gan_multiplier: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            iou_aware_objectness: true,
            gan_multiplier: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.w_box > 0.0 && w.w_cls > 0.0 && w.w_dfl > 0.0) {
            return Err(Error::Parameter(format!("loss weights must be > 0, got {w:?}")));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 || self.gan_multiplier < 0.0 {
            return Err(Error::Parameter("focal alpha in [0, 1], gamma >= 0, multiplier >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub cls: f64,
    pub dfl: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub parts: LossParts,
    /// d total / d raw, one tensor per level.
    pub grads: Vec<Tensor>,
    pub num_positive: usize,
    /// DFL targets that fell outside the bin range and were clamped.
    pub clamped_targets: usize,
}

/// Per-image inputs to [`total_loss`].
pub struct ImageTargets<'a> {
    pub gts: &'a [Labeled],
    pub assignment: &'a Assignment,
    pub decoded: &'a [DecodedSlot],
    /// Multiplier on every term of this image.
    pub weight: f64,
}

/// `w_box * box + w_cls * cls + w_dfl * dfl` over a batch.
///
/// `box` and `dfl` average over assigned positives; `cls` sums the focal
/// loss of the objectness logit and every class logit over all slots and
/// divides by the positive count (at least 1).
pub fn total_loss(
    raw: &RawPrediction,
    cfg: &DetectorConfig,
    images: &[ImageTargets<'_>],
    lc: &LossConfig,
) -> Result<LossOutput> {
    raw.validate(cfg)?;
    if images.len() != raw.batch() {
        return Err(Error::Contract(format!(
            "{} image targets for a batch of {}",
            images.len(),
            raw.batch()
        )));
    }
    let slots = cfg.slots();
    let bins = cfg.dfl_bins;
    let obj_ch = 4 * bins;
    let n_pos: usize = images.iter().map(|im| im.assignment.num_positive()).sum();
    let norm = 1.0 / n_pos.max(1) as f64;
    let (alpha, gamma) = (lc.focal_alpha, lc.focal_gamma);
    let LossWeights { w_box, w_cls, w_dfl } = lc.weights;

    let mut grads: Vec<Tensor> = raw.levels.iter().map(Tensor::zeros_like).collect();
    let (mut box_sum, mut cls_sum, mut dfl_sum) = (0.0, 0.0, 0.0);
    let mut clamped_targets = 0;

    for (b, im) in images.iter().enumerate() {
        if im.assignment.slots.len() != slots.len() || im.decoded.len() != slots.len() {
            return Err(Error::Contract("assignment/decoded length does not match slot count".into()));
        }
        let wimg = im.weight;
        for (si, slot) in slots.iter().enumerate() {
            let logits = raw.logits(cfg, b, slot);
            let target = im.assignment.slots[si];
            let d = &im.decoded[si];
            let mut g = vec![0.0; cfg.per_anchor()];

            let (gt_class, obj_target) = match target {
                Some(gi) => {
                    let gt = im.gts.get(gi).ok_or_else(|| {
                        Error::Contract(format!("assignment points at gt {gi}, image has {}", im.gts.len()))
                    })?;
                    let ov = if d.bbox.validate().is_ok() { iou(&d.bbox, &gt.bbox) } else { 0.0 };
                    (Some(gt.class.id()), if lc.iou_aware_objectness { ov } else { 1.0 })
                }
                None => (None, 0.0),
            };

            // Classification: objectness plus every class logit.
            let (l, dl) = focal_term(logits[obj_ch], obj_target, alpha, gamma);
            cls_sum += wimg * l;
            g[obj_ch] += w_cls * wimg * norm * dl;
            for c in 0..cfg.num_classes {
                let t = if gt_class == Some(c) { 1.0 } else { 0.0 };
                let (l, dl) = focal_term(logits[obj_ch + 1 + c], t, alpha, gamma);
                cls_sum += wimg * l;
                g[obj_ch + 1 + c] += w_cls * wimg * norm * dl;
            }

            if let Some(gi) = target {
                let gt = &im.gts[gi].bbox;
                let st = slot.stride;
                // Box: CIoU through the expected side offsets.
                let (l, dbox) = ciou_loss_grad(&d.bbox, gt);
                box_sum += wimg * l;
                let dside = [-st * dbox[0], -st * dbox[1], st * dbox[2], st * dbox[3]];
                for s in 0..4 {
                    let e = d.sides[s];
                    for (j, p) in d.side_probs[s].iter().enumerate() {
                        g[s * bins + j] += w_box * wimg * norm * dside[s] * p * (j as f64 - e);
                    }
                }
                // DFL on the true side distances in bin units.
                let (cx, cy) = slot.center();
                let targets = [(cx - gt.xmin) / st, (cy - gt.ymin) / st, (gt.xmax - cx) / st, (gt.ymax - cy) / st];
                for (s, &y) in targets.iter().enumerate() {
                    let (l, dg, clamped) = dfl_loss(&logits[s * bins..(s + 1) * bins], y);
                    clamped_targets += usize::from(clamped);
                    dfl_sum += wimg * l / 4.0;
                    for (j, v) in dg.iter().enumerate() {
                        g[s * bins + j] += w_dfl * wimg * norm * v / 4.0;
                    }
                }
            }

            let gl = grads[slot.level].data_mut();
            for (ch, v) in g.into_iter().enumerate() {
                if v != 0.0 {
                    gl[raw.index(cfg, b, slot, ch)] += v;
                }
            }
        }
    }

    let parts = LossParts {
        box_loss: box_sum * norm,
        cls: cls_sum * norm,
        dfl: dfl_sum * norm,
        total: w_box * box_sum * norm + w_cls * cls_sum * norm + w_dfl * dfl_sum * norm,
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("total_loss"));
    }
    Ok(LossOutput {
        parts,
        grads,
        num_positive: n_pos,
        clamped_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn ciou_identical_is_zero() {
        let a = bx(3.0, 4.0, 10.0, 9.0);
        assert!(ciou_loss(&a, &a).abs() < 1e-9);
    }

    #[test]
    fn ciou_far_translation() {
        // Same square shapes: v = 0, IoU = 0; rho^2 = 200, c^2 = 242.
        let l = ciou_loss(&bx(0.0, 0.0, 1.0, 1.0), &bx(10.0, 10.0, 11.0, 11.0));
        let expect = 1.0 + 200.0 / (242.0 + EPS);
        assert!((l - expect).abs() < 1e-9, "{l} vs {expect}");
    }

    #[test]
    fn focal_limits() {
        let (l, _) = focal_term(40.0, 1.0, 0.25, 2.0);
        assert!(l < 1e-30);
        let (l, _) = focal_term(0.0, 1.0, 0.5, 0.0);
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-15);
        let (l, _) = focal_term(0.0, 1.0, 0.25, 2.0);
        assert!((l - (-0.25 * 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((l - 0.043_321_698_784_996_6).abs() < 1e-12);
    }

    #[test]
    fn dfl_cases() {
        let mut onehot = vec![-50.0; 8];
        onehot[3] = 50.0;
        assert!(dfl_loss(&onehot, 3.0).0 < 1e-12);
        let (l, _, c) = dfl_loss(&[0.0; 8], 3.5);
        assert!((l - 8f64.ln()).abs() < 1e-12);
        assert!(!c);
        let (_, _, c) = dfl_loss(&[0.0; 8], 7.5);
        assert!(c);
    }

    #[test]
    fn focal_loss_shape_errors() {
        let t = Tensor::zeros(&[2, 3]).unwrap();
        assert!(focal_loss(&t, &[None], 0.25, 2.0).is_err());
        let (l, g) = focal_loss(&t, &[None, Some(1)], 0.25, 2.0).unwrap();
        assert!(l > 0.0);
        assert_eq!(g.shape(), &[2, 3]);
    }
}
