//! Dataset types, VOC ingestion, synthetic boards, augmentation and splits.

pub mod augment;
pub mod manifest;
pub mod split;
pub mod synth;
pub mod voc;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{apply_augmentations, AugmentOp};
pub use split::split_dataset;
pub use synth::{synth_board, SynthSpec};
pub use voc::{parse_voc_annotation, write_voc_annotation, ClassMap, VocAnnotation};

/// The six PCB defect categories. Integer ids follow declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectClass {
    MissingHole,
    MouseBite,
    OpenCircuit,
    Short,
    Spur,
    SpuriousCopper,
}

pub const NUM_CLASSES: usize = 6;

impl DefectClass {
    pub const ALL: [DefectClass; NUM_CLASSES] = [
        DefectClass::MissingHole,
        DefectClass::MouseBite,
        DefectClass::OpenCircuit,
        DefectClass::Short,
        DefectClass::Spur,
        DefectClass::SpuriousCopper,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::MissingHole => "missing_hole",
            DefectClass::MouseBite => "mouse_bite",
            DefectClass::OpenCircuit => "open_circuit",
            DefectClass::Short => "short",
            DefectClass::Spur => "spur",
            DefectClass::SpuriousCopper => "spurious_copper",
        }
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownClass(s.to_owned()))
    }
}

/// Axis-aligned box in continuous pixel coordinates (corner convention).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite());
        if finite && self.xmin < self.xmax && self.ymin < self.ymax {
            Ok(())
        } else {
            Err(Error::Validation(format!("degenerate or inverted box {self:?}")))
        }
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.xmin >= 0.0 && self.ymin >= 0.0 && self.xmax <= width && self.ymax <= height
    }

    /// Clips to `[0, width] x [0, height]`; may become degenerate.
    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        BBox {
            xmin: self.xmin.clamp(0.0, width),
            ymin: self.ymin.clamp(0.0, height),
            xmax: self.xmax.clamp(0.0, width),
            ymax: self.ymax.clamp(0.0, height),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub bbox: BBox,
    pub class: DefectClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Real,
    Synthetic,
    GanComposited,
}

/// An RGB board image with its ground-truth defects.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: RgbImage,
    pub boxes: Vec<Labeled>,
    pub source: ImageSource,
}

impl AnnotatedImage {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// Every box valid and inside the raster.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        for l in &self.boxes {
            l.bbox.validate()?;
            if !l.bbox.within(w, h) {
                return Err(Error::Validation(format!(
                    "{:?} outside {w}x{h} image {}",
                    l.bbox, self.id
                )));
            }
        }
        Ok(())
    }
}

/// `[1, 3, H, W]` tensor with values `pixel / 255`.
pub fn normalize_image(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data).expect("raster dims are non-zero")
}

/// Stacks single-image tensors along the batch axis.
pub fn batch_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for img in images {
        let t = normalize_image(img);
        let d = [t.shape()[2], t.shape()[3]];
        if *dims.get_or_insert(d) != d {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let [h, w] = dims.ok_or(Error::Empty("image batch"))?;
    Tensor::new(&[n, 3, h, w], data)
}
