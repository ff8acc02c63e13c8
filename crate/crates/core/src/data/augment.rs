//! Label-preserving augmentations: quarter-turn rotation, scaling and
//! contrast adjustment.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, BBox, Labeled};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    /// `k` clockwise quarter turns about the image center, `k` in 1..=3.
    Rotate90 { k: u8 },
    /// Scale about the origin with nearest-neighbour resampling, `s` in [0.5, 2].
    Scale { s: f64 },
    /// Per-channel contrast about the channel mean, `c` in [0.5, 1.5].
    Contrast { c: f64 },
    /// Draws `k` uniformly from 0..=3 (0 leaves the image as is).
    RandomRotate90,
    RandomScale { min: f64, max: f64 },
    RandomContrast { min: f64, max: f64 },
}

fn check_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v >= lo && v <= hi {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} = {v} outside [{lo}, {hi}]")))
    }
}

impl AugmentOp {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentOp::Rotate90 { k } => {
                if (1..=3).contains(&k) {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("rotate90 k = {k} not in 1..=3")))
                }
            }
            AugmentOp::Scale { s } => check_range("scale", s, 0.5, 2.0),
            AugmentOp::Contrast { c } => check_range("contrast", c, 0.5, 1.5),
            AugmentOp::RandomRotate90 => Ok(()),
            AugmentOp::RandomScale { min, max } => {
                check_range("scale min", min, 0.5, 2.0)?;
                check_range("scale max", max, min, 2.0)
            }
            AugmentOp::RandomContrast { min, max } => {
                check_range("contrast min", min, 0.5, 1.5)?;
                check_range("contrast max", max, min, 1.5)
            }
        }
    }

    /// Resolves random variants into concrete ops; `None` means no-op.
    fn resolve(&self, rng: &mut ChaCha8Rng) -> Option<AugmentOp> {
        match *self {
            AugmentOp::RandomRotate90 => {
                let k = rng.random_range(0..4u8);
                (k > 0).then_some(AugmentOp::Rotate90 { k })
            }
            AugmentOp::RandomScale { min, max } => Some(AugmentOp::Scale {
                s: if min < max { rng.random_range(min..=max) } else { min },
            }),
            AugmentOp::RandomContrast { min, max } => Some(AugmentOp::Contrast {
                c: if min < max { rng.random_range(min..=max) } else { min },
            }),
            op => Some(op),
        }
    }
}

/// Applies `ops` in order. Random variants draw from a stream seeded by
/// `seed`; boxes follow the exact corner mapping of each geometric op.
pub fn apply_augmentations(img: &AnnotatedImage, ops: &[AugmentOp], seed: u64) -> Result<AnnotatedImage> {
    for op in ops {
        op.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for op in ops {
        match op.resolve(&mut rng) {
            Some(AugmentOp::Rotate90 { k }) => out = rotate90(&out, k),
            Some(AugmentOp::Scale { s }) => out = scale(&out, s),
            Some(AugmentOp::Contrast { c }) => contrast(&mut out.image, c),
            _ => {}
        }
    }
    Ok(out)
}

fn rotate_once(img: &AnnotatedImage) -> AnnotatedImage {
    let (w, h) = (img.width(), img.height());
    let mut raster = RgbImage::new(h, w);
    for (x, y, p) in img.image.enumerate_pixels() {
        raster.put_pixel(h - 1 - y, x, *p);
    }
    let hf = h as f64;
    // (x, y) -> (H - y, x); bounding box of the mapped corners.
    let boxes = img
        .boxes
        .iter()
        .map(|l| Labeled {
            bbox: BBox {
                xmin: hf - l.bbox.ymax,
                ymin: l.bbox.xmin,
                xmax: hf - l.bbox.ymin,
                ymax: l.bbox.xmax,
            },
            class: l.class,
        })
        .collect();
    AnnotatedImage {
        id: img.id.clone(),
        image: raster,
        boxes,
        source: img.source,
    }
}

fn rotate90(img: &AnnotatedImage, k: u8) -> AnnotatedImage {
    let mut out = rotate_once(img);
    for _ in 1..k {
        out = rotate_once(&out);
    }
    out
}

/// Output size is `round(W s) x round(H s)`; boxes are scaled by the
/// realised per-axis factors so they stay exactly inside the raster.
fn scale(img: &AnnotatedImage, s: f64) -> AnnotatedImage {
    let (w, h) = (img.width(), img.height());
    let nw = ((w as f64 * s).round() as u32).max(1);
    let nh = ((h as f64 * s).round() as u32).max(1);
    let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
    let raster = RgbImage::from_fn(nw, nh, |x, y| {
        let src_x = (((x as f64 + 0.5) / sx) as u32).min(w - 1);
        let src_y = (((y as f64 + 0.5) / sy) as u32).min(h - 1);
        *img.image.get_pixel(src_x, src_y)
    });
    let boxes = img
        .boxes
        .iter()
        .map(|l| Labeled {
            bbox: BBox {
                xmin: l.bbox.xmin * sx,
                ymin: l.bbox.ymin * sy,
                xmax: l.bbox.xmax * sx,
                ymax: l.bbox.ymax * sy,
            },
            class: l.class,
        })
        .collect();
    AnnotatedImage {
        id: img.id.clone(),
        image: raster,
        boxes,
        source: img.source,
    }
}

fn contrast(raster: &mut RgbImage, c: f64) {
    let n = (raster.width() * raster.height()) as f64;
    let mut mean = [0.0f64; 3];
    for p in raster.pixels() {
        for ch in 0..3 {
            mean[ch] += p.0[ch] as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for p in raster.pixels_mut() {
        for ch in 0..3 {
            let v = mean[ch] + c * (p.0[ch] as f64 - mean[ch]);
            p.0[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Crops (right/bottom) or pads (with the per-channel mean) to exactly
/// `width x height`. Boxes are clipped; a box keeping less than half of its
/// area is dropped.
pub fn fit_canvas(img: &AnnotatedImage, width: u32, height: u32) -> AnnotatedImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let n = (img.width() * img.height()) as f64;
    let mut mean = [0.0f64; 3];
    for p in img.image.pixels() {
        for ch in 0..3 {
            mean[ch] += p.0[ch] as f64 / n;
        }
    }
    let fill = Rgb(mean.map(|m| m.round() as u8));
    let raster = RgbImage::from_fn(width, height, |x, y| {
        if x < img.width() && y < img.height() {
            *img.image.get_pixel(x, y)
        } else {
            fill
        }
    });
    let boxes = img
        .boxes
        .iter()
        .filter_map(|l| {
            let c = l.bbox.clipped(width as f64, height as f64);
            (c.validate().is_ok() && c.area() >= 0.5 * l.bbox.area()).then_some(Labeled {
                bbox: c,
                class: l.class,
            })
        })
        .collect();
    AnnotatedImage {
        id: img.id.clone(),
        image: raster,
        boxes,
        source: img.source,
    }
}
