//! Class-wise NMS and per-class confidence thresholds chosen by F1.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DefectClass, Labeled};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::evaluate::match_image;
use crate::losses::iou;

pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Score descending, then smaller area, then input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].bbox.area().total_cmp(&dets[b].bbox.area()))
            .then(a.cmp(&b))
    });
    order
}

/// Indices of the detections greedy class-wise NMS keeps, in keep order.
pub fn nms_indices(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    let mut by_class: BTreeMap<DefectClass, Vec<usize>> = BTreeMap::new();
    for i in score_order(dets) {
        let same = by_class.entry(dets[i].class).or_default();
        if same.iter().all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_thresh) {
            same.push(i);
            kept.push(i);
        }
    }
    kept
}

/// Greedy class-wise non-maximum suppression. A detection survives iff its
/// IoU with every already kept detection of its class is at most
/// `iou_thresh`. Output is in keep order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    nms_indices(dets, iou_thresh).into_iter().map(|i| dets[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub thresholds: BTreeMap<DefectClass, f64>,
    pub nms_iou: f64,
}

impl ThresholdSet {
    pub fn uniform(threshold: f64, nms_iou: f64) -> Self {
        ThresholdSet {
            thresholds: DefectClass::ALL.iter().map(|&c| (c, threshold)).collect(),
            nms_iou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in DefectClass::ALL {
            match self.thresholds.get(&c) {
                Some(t) if (0.0..=1.0).contains(t) => {}
                Some(t) => return Err(Error::Validation(format!("threshold for {c} out of [0, 1]: {t}"))),
                None => return Err(Error::Validation(format!("no threshold for {c}"))),
            }
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Validation(format!("nms_iou out of [0, 1]: {}", self.nms_iou)));
        }
        Ok(())
    }

    pub fn get(&self, class: DefectClass) -> f64 {
        self.thresholds.get(&class).copied().unwrap_or(1.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: ThresholdSet = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }
}

/// Detections of one class across a dataset as `(score, is_tp)`, plus the
/// class's ground-truth count.
pub fn class_flags(
    dets: &[Vec<Detection>],
    gts: &[Vec<Labeled>],
    class: DefectClass,
    match_iou: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut flags = Vec::new();
    let mut n_gt = 0;
    for (d, g) in dets.iter().zip(gts) {
        let m = match_image(d, g, match_iou);
        for (det, tp) in d.iter().zip(&m.tp) {
            if det.class == class {
                flags.push((det.score, *tp));
            }
        }
        n_gt += g.iter().filter(|l| l.class == class).count();
    }
    (flags, n_gt)
}

/// The cut `score >= t` over `flags` maximising F1, as `(t, f1, precision,
/// recall)`. Candidates are the observed scores; ties go to the higher
/// threshold. `None` when the class has no ground truth.
pub fn best_f1_cut(flags: &[(f64, bool)], n_gt: usize) -> Option<(f64, f64, f64, f64)> {
    if n_gt == 0 {
        return None;
    }
    let mut sorted = flags.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best: Option<(f64, f64, f64, f64)> = None;
    let (mut tp, mut n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        // Everything with this exact score is kept together.
        while i < sorted.len() && sorted[i].0 == t {
            tp += usize::from(sorted[i].1);
            n += 1;
            i += 1;
        }
        let p = tp as f64 / n as f64;
        let r = tp as f64 / n_gt as f64;
        // One correctly rounded division, so equal ratios tie exactly.
        let f1 = 2.0 * tp as f64 / (n + n_gt) as f64;
        // Strictly greater: scanning from high to low keeps the higher cut.
        if best.is_none_or(|b| f1 > b.1) {
            best = Some((t, f1, p, r));
        }
    }
    Some(best.unwrap_or((1.0, 0.0, 0.0, 0.0)))
}

/// Per-class threshold maximising F1 on validation detections (post-NMS).
/// Classes without ground truth get 1.0.
pub fn calibrate_thresholds(
    val_dets: &[Vec<Detection>],
    val_gts: &[Vec<Labeled>],
    match_iou: f64,
    nms_iou: f64,
) -> Result<ThresholdSet> {
    if val_dets.is_empty() || val_dets.len() != val_gts.len() {
        return Err(Error::Contract(format!(
            "calibration needs a non-empty validation set with one detection list per image, got {} and {}",
            val_dets.len(),
            val_gts.len()
        )));
    }
    let thresholds = DefectClass::ALL
        .iter()
        .map(|&c| {
            let (flags, n_gt) = class_flags(val_dets, val_gts, c, match_iou);
            (c, best_f1_cut(&flags, n_gt).map_or(1.0, |b| b.0))
        })
        .collect();
    Ok(ThresholdSet { thresholds, nms_iou })
}

/// Keeps detections with `score >= threshold[class]`, preserving order.
pub fn filter_detections(dets: &[Detection], thresholds: &ThresholdSet) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.score >= thresholds.get(d.class))
        .copied()
        .collect()
}
