use super::{AnchorSet, DecodedSlot, Slot};
use crate::data::Labeled;
use crate::losses::iou;

/// Number of top candidate IoUs summed to size a ground truth's dynamic k,
/// and the cap on k itself.
pub const DYNAMIC_K_MAX: usize = 10;

/// Slot-to-ground-truth map for one image; `None` is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub slots: Vec<Option<usize>>,
}

impl Assignment {
    pub fn background(n: usize) -> Self {
        Assignment { slots: vec![None; n] }
    }

    pub fn num_positive(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.map(|g| (i, g)))
    }
}

fn center_inside(slot: &Slot, gt: &Labeled) -> bool {
    let (cx, cy) = slot.center();
    let b = &gt.bbox;
    cx > b.xmin && cx < b.xmax && cy > b.ymin && cy < b.ymax
}

/// Dynamic-k assignment for one image.
///
/// For each ground truth, candidates are slots whose cell center lies inside
/// its box, ranked by `p(class) * IoU(decoded, gt)`; it takes the top
/// `clamp(round(sum of its top-10 candidate IoUs), 1, 10)`. A slot claimed by
/// several ground truths goes to the one with the higher alignment (lower
/// index on ties). A ground truth left with nothing takes the free slot whose
/// anchor prior overlaps it most. Ties anywhere resolve to the lower index.
pub fn assign_targets(
    gts: &[Labeled],
    anchors: &AnchorSet,
    slots: &[Slot],
    decoded: &[DecodedSlot],
) -> Assignment {
    assert_eq!(slots.len(), decoded.len());
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; slots.len()];

    for (g, gt) in gts.iter().enumerate() {
        let mut cands: Vec<(usize, f64, f64)> = slots
            .iter()
            .enumerate()
            .filter(|(_, s)| center_inside(s, gt))
            .map(|(i, _)| {
                let d = &decoded[i];
                let ov = if d.bbox.validate().is_ok() { iou(&d.bbox, &gt.bbox) } else { 0.0 };
                let p = d.class_probs.get(gt.class.id()).copied().unwrap_or(0.0);
                (i, ov, p * ov)
            })
            .collect();
        if cands.is_empty() {
            continue;
        }
        let mut ious: Vec<f64> = cands.iter().map(|c| c.1).collect();
        ious.sort_by(|a, b| b.total_cmp(a));
        let top: f64 = ious.iter().take(DYNAMIC_K_MAX).sum();
        let k = (top.round() as usize).clamp(1, DYNAMIC_K_MAX);
        // Stable sort keeps lower slot index first among equal alignments.
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        for &(i, _, align) in cands.iter().take(k) {
            match owner[i] {
                Some((_, prev)) if prev >= align => {}
                _ => owner[i] = Some((g, align)),
            }
        }
    }

    let mut assigned: Vec<Option<usize>> = owner.iter().map(|o| o.map(|(g, _)| g)).collect();
    for (g, gt) in gts.iter().enumerate() {
        if assigned.contains(&Some(g)) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, slot) in slots.iter().enumerate() {
            if assigned[i].is_some() {
                continue;
            }
            let ov = iou(&anchors.prior_box(slot), &gt.bbox);
            if best.map_or(true, |(_, b)| ov > b) {
                best = Some((i, ov));
            }
        }
        if let Some((i, _)) = best {
            assigned[i] = Some(g);
        }
    }
    Assignment { slots: assigned }
}
