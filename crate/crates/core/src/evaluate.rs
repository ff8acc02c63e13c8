//! Detection matching, 101-point interpolated AP, mAP50 / mAP50-95 and the
//! per-class report table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DefectClass, Labeled};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::losses::iou;
use crate::postprocess::{best_f1_cut, class_flags, score_order};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Matching outcome for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageMatch {
    /// TP flag per detection, indexed like the input.
    pub tp: Vec<bool>,
    /// Matched ground-truth index per detection.
    pub gt: Vec<Option<usize>>,
    pub false_negatives: usize,
}

/// Greedy matching in score order (ties: smaller area, then input order).
/// A detection takes the unmatched same-class ground truth with the highest
/// IoU if that IoU is at least `tau`; IoU ties go to the lower index.
pub fn match_image(dets: &[Detection], gts: &[Labeled], tau: f64) -> ImageMatch {
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    let mut gt = vec![None; dets.len()];
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, l) in gts.iter().enumerate() {
            if taken[g] || l.class != dets[i].class {
                continue;
            }
            let ov = iou(&dets[i].bbox, &l.bbox);
            if ov >= tau && best.is_none_or(|(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[i] = true;
            gt[i] = Some(g);
        }
    }
    ImageMatch {
        tp,
        gt,
        false_negatives: taken.iter().filter(|t| !**t).count(),
    }
}

pub fn match_detections(dets: &[Vec<Detection>], gts: &[Vec<Labeled>], tau: f64) -> Vec<ImageMatch> {
    dets.iter().zip(gts).map(|(d, g)| match_image(d, g, tau)).collect()
}

/// AP from TP/FP flags already sorted by descending score.
///
/// `(1/101) * sum over r in {0, 0.01, ..., 1} of max{precision at recall >= r}`.
/// Recall comparisons are done in integers so grid points land exactly.
/// Returns 0 when `n_gt == 0`; callers exclude such classes from means.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        points.push((tp, tp as f64 / (i + 1) as f64));
    }
    // Envelope from the right: best precision at this recall or beyond.
    let mut env = vec![0.0; points.len()];
    let mut run = 0.0f64;
    for i in (0..points.len()).rev() {
        run = run.max(points[i].1);
        env[i] = run;
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..=100usize {
        // First point whose recall tp / n_gt >= k / 100.
        while j < points.len() && points[j].0 * 100 < k * n_gt {
            j += 1;
        }
        if j < points.len() {
            sum += env[j];
        }
    }
    sum / 101.0
}

/// Class flags across all images sorted by descending score; ties keep
/// image order, then in-image score order.
fn sorted_flags(dets: &[Vec<Detection>], matches: &[ImageMatch], class: DefectClass) -> Vec<bool> {
    let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (d, m)) in dets.iter().zip(matches).enumerate() {
        for (rank, i) in score_order(d).into_iter().enumerate() {
            if d[i].class == class {
                all.push((d[i].score, img, rank, m.tp[i]));
            }
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().map(|x| x.3).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub instances: usize,
    /// AP at each threshold of [`iou_thresholds`].
    pub ap: Vec<f64>,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Classes present in the ground truth only.
    pub per_class: BTreeMap<DefectClass, ClassAp>,
    pub map50: f64,
    pub map50_95: f64,
}

pub fn map_range(dets: &[Vec<Detection>], gts: &[Vec<Labeled>]) -> Result<MapResult> {
    if dets.len() != gts.len() {
        return Err(Error::Contract(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let taus = iou_thresholds();
    let matches: Vec<Vec<ImageMatch>> = taus.iter().map(|&t| match_detections(dets, gts, t)).collect();
    let mut per_class = BTreeMap::new();
    for class in DefectClass::ALL {
        let n_gt: usize = gts.iter().flatten().filter(|l| l.class == class).count();
        if n_gt == 0 {
            continue;
        }
        let ap: Vec<f64> = matches
            .iter()
            .map(|m| average_precision(&sorted_flags(dets, m, class), n_gt))
            .collect();
        per_class.insert(
            class,
            ClassAp {
                instances: n_gt,
                ap50: ap[0],
                ap50_95: ap.iter().sum::<f64>() / ap.len() as f64,
                ap,
            },
        );
    }
    let n = per_class.len().max(1) as f64;
    Ok(MapResult {
        map50: per_class.values().map(|c| c.ap50).sum::<f64>() / n,
        map50_95: per_class.values().map(|c| c.ap50_95).sum::<f64>() / n,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: String,
    pub images: usize,
    pub instances: usize,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    /// Counts at the max-F1 operating point.
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `all` first, then one row per class present in the ground truth.
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub stamp: BTreeMap<String, String>,
}

/// Evaluates post-NMS detections against ground truth. P and R are taken at
/// each class's F1-maximising confidence at IoU 0.5; `all` averages the
/// class rows without weighting.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<Labeled>]) -> Result<EvalReport> {
    let maps = map_range(dets, gts)?;
    let mut rows = Vec::new();
    for (&class, ap) in &maps.per_class {
        let (flags, n_gt) = class_flags(dets, gts, class, 0.5);
        let (t, _, p, r) = best_f1_cut(&flags, n_gt).expect("class has ground truth");
        let kept = flags.iter().filter(|f| f.0 >= t);
        let tp = kept.clone().filter(|f| f.1).count();
        let fp = kept.count() - tp;
        rows.push(ReportRow {
            class: class.name().to_string(),
            images: gts.iter().filter(|g| g.iter().any(|l| l.class == class)).count(),
            instances: ap.instances,
            precision: p,
            recall: r,
            map50: ap.ap50,
            map50_95: ap.ap50_95,
            tp,
            fp,
            fn_: n_gt - tp,
        });
    }
    let n = rows.len().max(1) as f64;
    let all = ReportRow {
        class: "all".into(),
        images: gts.len(),
        instances: gts.iter().map(Vec::len).sum(),
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        map50: maps.map50,
        map50_95: maps.map50_95,
        tp: rows.iter().map(|r| r.tp).sum(),
        fp: rows.iter().map(|r| r.fp).sum(),
        fn_: rows.iter().map(|r| r.fn_).sum(),
    };
    rows.insert(0, all);
    Ok(EvalReport {
        rows,
        stamp: BTreeMap::new(),
    })
}

pub const REPORT_HEADER: &str = "Class\tImages\tInstances\tP\tR\tmAP50\tmAP50-95";

/// Tab-separated table, numbers to two decimals.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            r.class, r.images, r.instances, r.precision, r.recall, r.map50, r.map50_95
        );
    }
    out
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

/// Re-renders the text table from a saved JSON report.
pub fn render_from_json(json: &str) -> Result<String> {
    let report: EvalReport = serde_json::from_str(json)?;
    Ok(report_table(&report))
}

/// One row of the training-curve log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
}

pub const CURVES_HEADER: &str = "epoch,split,box_loss,cls_loss,dfl_loss";

/// CSV text with full-precision (round-trip) numbers.
pub fn curves_csv(rows: &[CurveRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Empty("training curves"));
    }
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{:?},{:?},{:?}", r.epoch, r.split, r.box_loss, r.cls_loss, r.dfl_loss);
    }
    Ok(out)
}

pub fn log_training_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let text = curves_csv(rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses [`curves_csv`] output; `#` comment lines are skipped.
pub fn parse_curves_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(CURVES_HEADER) {
        return Err(Error::Validation("curves CSV header mismatch".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Validation(format!("bad curves row: {l}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CurveRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                split: f[1].to_string(),
                box_loss: num(f[2])?,
                cls_loss: num(f[3])?,
                dfl_loss: num(f[4])?,
            })
        })
        .collect()
}
