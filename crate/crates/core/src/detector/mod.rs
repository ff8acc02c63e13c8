//! Anchor-based single-stage detector: k-means anchor priors, a hybrid
//! depthwise/residual backbone with two-level fusion, dynamic-k target
//! assignment and distribution-based box decoding.

mod assign;
mod decode;
mod kmeans;
mod model;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use assign::{assign_targets, Assignment, DYNAMIC_K_MAX};
pub use decode::{decode_predictions, decode_slot, DecodedSlot, Detection};
pub use kmeans::{kmeans_anchors, kmeans_anchors_traced, mean_best_iou, shape_iou};
pub use model::{detector_forward, init_params, Detector};

/// Channel widths of the backbone and heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Widths {
    pub stem: usize,
    /// Output width of the depthwise-separable stages and the stride-8 level.
    pub stage8: usize,
    pub stage16: usize,
    pub head: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Widths {
            stem: 16,
            stage8: 32,
            stage16: 64,
            head: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub strides: Vec<usize>,
    pub anchors_per_scale: usize,
    pub dfl_bins: usize,
    pub widths: Widths,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 96,
            num_classes: NUM_CLASSES,
            strides: vec![8, 16],
            anchors_per_scale: 3,
            dfl_bins: 8,
            widths: Widths::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides != [8, 16] {
            return Err(Error::Parameter(format!(
                "the backbone emits strides [8, 16], config asks for {:?}",
                self.strides
            )));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Parameter(format!(
                "input size {} must be a positive multiple of the largest stride",
                self.input_size
            )));
        }
        if self.num_classes == 0 || self.num_classes > NUM_CLASSES {
            return Err(Error::Parameter(format!("num_classes {} out of range", self.num_classes)));
        }
        if self.dfl_bins < 2 || self.anchors_per_scale == 0 {
            return Err(Error::Parameter("need dfl_bins >= 2 and anchors_per_scale >= 1".into()));
        }
        let w = &self.widths;
        if [w.stem, w.stage8, w.stage16, w.head].contains(&0) {
            return Err(Error::Parameter("channel widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-anchor channel block: 4 side distributions, objectness, classes.
    pub fn per_anchor(&self) -> usize {
        4 * self.dfl_bins + 1 + self.num_classes
    }

    pub fn head_channels(&self) -> usize {
        self.anchors_per_scale * self.per_anchor()
    }

    pub fn grid(&self, level: usize) -> usize {
        self.input_size / self.strides[level]
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    /// Prediction slots per image across all levels.
    pub fn slots_per_image(&self) -> usize {
        (0..self.num_levels())
            .map(|l| self.grid(l) * self.grid(l) * self.anchors_per_scale)
            .sum()
    }

    /// Enumerates slots per image in the canonical order (level, row,
    /// column, anchor). Slot indices used throughout follow this order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.slots_per_image());
        for level in 0..self.num_levels() {
            let g = self.grid(level);
            for gy in 0..g {
                for gx in 0..g {
                    for anchor in 0..self.anchors_per_scale {
                        out.push(Slot {
                            level,
                            gy,
                            gx,
                            anchor,
                            stride: self.strides[level] as f64,
                        });
                    }
                }
            }
        }
        out
    }
}

/// One prediction location: a grid cell at some level plus an anchor index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub level: usize,
    pub gy: usize,
    pub gx: usize,
    pub anchor: usize,
    pub stride: f64,
}

impl Slot {
    pub fn center(&self) -> (f64, f64) {
        ((self.gx as f64 + 0.5) * self.stride, (self.gy as f64 + 0.5) * self.stride)
    }
}

/// Per-level anchor shapes `(w, h)` in pixels, ascending by area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub levels: Vec<Vec<(f64, f64)>>,
}

impl AnchorSet {
    pub fn validate(&self) -> Result<()> {
        for lvl in &self.levels {
            if lvl.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
                return Err(Error::Validation(format!("anchor sizes must be positive: {lvl:?}")));
            }
            if lvl.windows(2).any(|p| p[0].0 * p[0].1 > p[1].0 * p[1].1) {
                return Err(Error::Validation(format!("anchors not sorted by area: {lvl:?}")));
            }
        }
        Ok(())
    }

    /// Square `4 * stride` priors for every slot; used before k-means runs.
    pub fn uniform(cfg: &DetectorConfig) -> Self {
        AnchorSet {
            levels: cfg
                .strides
                .iter()
                .map(|&s| vec![(4.0 * s as f64, 4.0 * s as f64); cfg.anchors_per_scale])
                .collect(),
        }
    }

    /// Prior box of `slot` centred on its cell. Missing anchors fall back
    /// to a `4 * stride` square.
    pub fn prior_box(&self, slot: &Slot) -> BBox {
        let (w, h) = self
            .levels
            .get(slot.level)
            .and_then(|l| l.get(slot.anchor))
            .copied()
            .unwrap_or((4.0 * slot.stride, 4.0 * slot.stride));
        let (cx, cy) = slot.center();
        BBox {
            xmin: cx - w / 2.0,
            ymin: cy - h / 2.0,
            xmax: cx + w / 2.0,
            ymax: cy + h / 2.0,
        }
    }
}

/// Raw head outputs, one `[B, A * (4 * bins + 1 + C), H, W]` tensor per level.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub levels: Vec<Tensor>,
}

impl RawPrediction {
    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }

    pub fn validate(&self, cfg: &DetectorConfig) -> Result<()> {
        if self.levels.len() != cfg.num_levels() {
            return Err(Error::Shape(format!(
                "expected {} levels, got {}",
                cfg.num_levels(),
                self.levels.len()
            )));
        }
        let b = self.batch();
        for (l, t) in self.levels.iter().enumerate() {
            let g = cfg.grid(l);
            if t.shape() != [b, cfg.head_channels(), g, g] {
                return Err(Error::Shape(format!(
                    "level {l}: got {:?}, expected {:?}",
                    t.shape(),
                    [b, cfg.head_channels(), g, g]
                )));
            }
        }
        Ok(())
    }

    /// Flat index of channel `ch` of `slot`'s block for image `b`.
    pub fn index(&self, cfg: &DetectorConfig, b: usize, slot: &Slot, ch: usize) -> usize {
        let g = cfg.grid(slot.level);
        let c = slot.anchor * cfg.per_anchor() + ch;
        ((b * cfg.head_channels() + c) * g + slot.gy) * g + slot.gx
    }

    /// The `4 * bins + 1 + C` logits of one slot.
    pub fn logits(&self, cfg: &DetectorConfig, b: usize, slot: &Slot) -> Vec<f64> {
        let data = self.levels[slot.level].data();
        (0..cfg.per_anchor())
            .map(|ch| data[self.index(cfg, b, slot, ch)])
            .collect()
    }
}
