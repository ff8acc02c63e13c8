use serde::{Deserialize, Serialize};

use super::{DetectorConfig, RawPrediction, Slot};
use crate::data::{BBox, DefectClass};
use crate::math::{sigmoid, softmax};

/// One predicted defect.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: DefectClass,
    pub score: f64,
}

/// Everything the assignment and loss need from one slot's logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedSlot {
    /// Unclipped box; may be degenerate only if every side collapses to 0.
    pub bbox: BBox,
    /// Side distances `(l, t, r, b)` in bins, i.e. before scaling by stride.
    pub sides: [f64; 4],
    /// Softmax over bins, per side.
    pub side_probs: [Vec<f64>; 4],
    pub objectness: f64,
    pub class_probs: Vec<f64>,
}

impl DecodedSlot {
    /// `(argmax class, sigmoid(obj) * max softmax(class))`.
    pub fn best(&self) -> (usize, f64) {
        let (mut arg, mut max) = (0, f64::NEG_INFINITY);
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > max {
                (arg, max) = (i, p);
            }
        }
        (arg, self.objectness * max)
    }
}

/// Decodes one slot. Each side offset is the expectation of its bin
/// distribution, scaled by the stride and measured from the cell center.
pub fn decode_slot(raw: &RawPrediction, cfg: &DetectorConfig, b: usize, slot: &Slot) -> DecodedSlot {
    let logits = raw.logits(cfg, b, slot);
    let bins = cfg.dfl_bins;
    let side_probs: [Vec<f64>; 4] = std::array::from_fn(|s| softmax(&logits[s * bins..(s + 1) * bins]));
    let sides: [f64; 4] = std::array::from_fn(|s| {
        side_probs[s].iter().enumerate().map(|(i, p)| i as f64 * p).sum()
    });
    let (cx, cy) = slot.center();
    let st = slot.stride;
    let bbox = BBox {
        xmin: cx - sides[0] * st,
        ymin: cy - sides[1] * st,
        xmax: cx + sides[2] * st,
        ymax: cy + sides[3] * st,
    };
    DecodedSlot {
        bbox,
        sides,
        side_probs,
        objectness: sigmoid(logits[4 * bins]),
        class_probs: softmax(&logits[4 * bins + 1..]),
    }
}

/// Pre-NMS detections per image: one per slot, labelled with the arg-max
/// class and clipped to the input.
pub fn decode_predictions(raw: &RawPrediction, cfg: &DetectorConfig) -> Vec<Vec<Detection>> {
    let slots = cfg.slots();
    let size = cfg.input_size as f64;
    (0..raw.batch())
        .map(|b| {
            slots
                .iter()
                .filter_map(|slot| {
                    let d = decode_slot(raw, cfg, b, slot);
                    let (cls, score) = d.best();
                    let bbox = d.bbox.clipped(size, size);
                    bbox.validate().ok()?;
                    Some(Detection {
                        bbox,
                        class: DefectClass::from_id(cls)?,
                        score,
                    })
                })
                .collect()
        })
        .collect()
}
