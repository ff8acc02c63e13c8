//! Procedural PCB-like boards with injected defects and exact labels.
//!
//! A board is a noisy substrate with copper traces and drilled pads. Each
//! defect is rendered as a self-contained rectangular patch (its own
//! substrate plus the local copper feature carrying the flaw) and pasted onto
//! the board; the patch rectangle is the ground-truth box.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, BBox, DefectClass, ImageSource, Labeled, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SUBSTRATE: [f64; 3] = [28.0, 96.0, 52.0];
const COPPER: [f64; 3] = [200.0, 160.0, 72.0];
const DRILL: [f64; 3] = [22.0, 22.0, 26.0];
const NOISE: f64 = 10.0;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub width: u32,
    pub height: u32,
    /// Inclusive range of defects drawn per board.
    pub defects_min: usize,
    pub defects_max: usize,
    /// Relative sampling weight per class id; zero disables a class.
    pub class_weights: [f64; NUM_CLASSES],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 96,
            height: 96,
            defects_min: 1,
            defects_max: 4,
            class_weights: [1.0; NUM_CLASSES],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::Parameter(format!(
                "synthetic boards must be at least 64x64, got {}x{}",
                self.width, self.height
            )));
        }
        if self.defects_min > self.defects_max {
            return Err(Error::Parameter("defects_min > defects_max".into()));
        }
        let total: f64 = self.class_weights.iter().sum();
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || (self.defects_max > 0 && !(total > 0.0)) {
            return Err(Error::Parameter(format!(
                "class weights must be >= 0 with a positive sum, got {:?}",
                self.class_weights
            )));
        }
        Ok(())
    }

    pub fn enabled_classes(&self) -> Vec<DefectClass> {
        DefectClass::ALL
            .into_iter()
            .filter(|c| self.class_weights[c.id()] > 0.0)
            .collect()
    }
}

/// Small RGB canvas in float colour space.
#[derive(Clone, Debug)]
pub struct Patch {
    pub width: u32,
    pub height: u32,
    data: Vec<[f64; 3]>,
}

fn noisy(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = rng.random_range(-NOISE..NOISE);
    base.map(|c| c + n)
}

impl Patch {
    fn substrate(width: u32, height: u32, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..width * height).map(|_| noisy(SUBSTRATE, rng)).collect();
        Patch {
            width,
            height,
            data,
        }
    }

    fn paint(&mut self, x: i64, y: i64, base: [f64; 3], rng: &mut ChaCha8Rng) {
        if x >= 0 && y >= 0 && (x as u32) < self.width && (y as u32) < self.height {
            self.data[(y as u32 * self.width + x as u32) as usize] = noisy(base, rng);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, base: [f64; 3], rng: &mut ChaCha8Rng) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.paint(x, y, base, rng);
            }
        }
    }

    /// Pixels whose centers lie within `r` of `(cx, cy)`.
    fn disk(&mut self, cx: f64, cy: f64, r: f64, base: [f64; 3], rng: &mut ChaCha8Rng) {
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.paint(x, y, base, rng);
                }
            }
        }
    }

    fn triangle(&mut self, pts: [(f64, f64); 3], base: [f64; 3], rng: &mut ChaCha8Rng) {
        let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let xs = pts.map(|p| p.0);
        let ys = pts.map(|p| p.1);
        let (x0, x1) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
        let (y0, y1) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
        for y in y0.floor() as i64..=y1.ceil() as i64 {
            for x in x0.floor() as i64..=x1.ceil() as i64 {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let e = [edge(pts[0], pts[1], p), edge(pts[1], pts[2], p), edge(pts[2], pts[0], p)];
                if e.iter().all(|v| *v >= 0.0) || e.iter().all(|v| *v <= 0.0) {
                    self.paint(x, y, base, rng);
                }
            }
        }
    }

    /// Swaps axes; lets every archetype appear in both orientations.
    fn transposed(&self) -> Patch {
        let mut data = Vec::with_capacity(self.data.len());
        for x in 0..self.width {
            for y in 0..self.height {
                data.push(self.data[(y * self.width + x) as usize]);
            }
        }
        Patch {
            width: self.height,
            height: self.width,
            data,
        }
    }

    fn flipped_vertically(&self) -> Patch {
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[(y * self.width) as usize..((y + 1) * self.width) as usize]);
        }
        Patch {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb<u8> {
        Rgb(self.data[(y * self.width + x) as usize].map(|c| c.round().clamp(0.0, 255.0) as u8))
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| self.pixel(x, y))
    }
}

/// Renders one defect of `class` with its local copper context.
pub fn render_defect(class: DefectClass, rng: &mut ChaCha8Rng) -> Patch {
    let patch = match class {
        DefectClass::MissingHole => {
            let r: f64 = rng.random_range(4.0..5.5);
            let side = (2.0 * r).ceil() as u32 + 4;
            let mut p = Patch::substrate(side, side, rng);
            let c = side as f64 / 2.0;
            p.disk(c, c, r, COPPER, rng);
            p
        }
        DefectClass::MouseBite => {
            let (len, thick) = (rng.random_range(15..21u32), rng.random_range(5..7u32));
            let mut p = Patch::substrate(len, thick + 4, rng);
            p.rect(0, 2, len as i64, 2 + thick as i64, COPPER, rng);
            let bites = rng.random_range(2..4u32);
            for i in 0..bites {
                let cx = len as f64 * (i as f64 + 0.5 + rng.random_range(-0.15..0.15)) / bites as f64;
                p.disk(cx, 2.0, rng.random_range(1.8..2.6), SUBSTRATE, rng);
            }
            p
        }
        DefectClass::OpenCircuit => {
            let (len, thick) = (rng.random_range(16..23u32), rng.random_range(4..6u32));
            let mut p = Patch::substrate(len, thick + 4, rng);
            let gap = rng.random_range(4..7i64);
            let g0 = len as i64 / 2 - gap / 2 + rng.random_range(-2..3i64);
            p.rect(0, 2, g0, 2 + thick as i64, COPPER, rng);
            p.rect(g0 + gap, 2, len as i64, 2 + thick as i64, COPPER, rng);
            p
        }
        DefectClass::Short => {
            let len = rng.random_range(14..20u32);
            let (thick, gap) = (3i64, rng.random_range(5..8i64));
            let h = (2 + thick + gap + thick + 2) as u32;
            let mut p = Patch::substrate(len, h, rng);
            p.rect(0, 2, len as i64, 2 + thick, COPPER, rng);
            p.rect(0, 2 + thick + gap, len as i64, 2 + 2 * thick + gap, COPPER, rng);
            let bx = rng.random_range(3..(len as i64 - 6));
            p.rect(bx, 2 + thick, bx + rng.random_range(2..4i64), 2 + thick + gap, COPPER, rng);
            p
        }
        DefectClass::Spur => {
            let len = rng.random_range(15..21u32);
            let (thick, spike) = (4i64, rng.random_range(5..8i64));
            let h = (2 + spike + thick + 2) as u32;
            let mut p = Patch::substrate(len, h, rng);
            let top = 2 + spike;
            p.rect(0, top, len as i64, top + thick, COPPER, rng);
            let base = rng.random_range(6.0..9.0);
            let cx = len as f64 / 2.0 + rng.random_range(-2.0..2.0);
            let tip = cx + rng.random_range(-2.0..2.0);
            p.triangle(
                [(cx - base / 2.0, top as f64), (cx + base / 2.0, top as f64), (tip, 2.0)],
                COPPER,
                rng,
            );
            p
        }
        DefectClass::SpuriousCopper => {
            let (w, h) = (rng.random_range(10..15u32), rng.random_range(9..14u32));
            let mut p = Patch::substrate(w, h, rng);
            let blobs = rng.random_range(2..4);
            for _ in 0..blobs {
                let cx = rng.random_range(4.0..(w as f64 - 4.0));
                let cy = rng.random_range(4.0..(h as f64 - 4.0));
                p.disk(cx, cy, rng.random_range(2.5..3.8), COPPER, rng);
            }
            p
        }
    };
    let patch = if rng.random_bool(0.5) { patch.flipped_vertically() } else { patch };
    if rng.random_bool(0.5) {
        patch.transposed()
    } else {
        patch
    }
}

fn draw_background(width: u32, height: u32, rng: &mut ChaCha8Rng) -> Patch {
    let mut p = Patch::substrate(width, height, rng);
    let (w, h) = (width as i64, height as i64);
    for _ in 0..rng.random_range(2..5) {
        let y = rng.random_range(4..h - 8);
        let x0 = rng.random_range(0..w / 3);
        let x1 = rng.random_range(2 * w / 3..=w);
        p.rect(x0, y, x1, y + rng.random_range(3..5), COPPER, rng);
    }
    for _ in 0..rng.random_range(1..4) {
        let x = rng.random_range(4..w - 8);
        let y0 = rng.random_range(0..h / 3);
        let y1 = rng.random_range(2 * h / 3..=h);
        p.rect(x, y0, x + rng.random_range(3..5), y1, COPPER, rng);
    }
    for _ in 0..rng.random_range(3..7) {
        let (cx, cy) = (rng.random_range(8.0..w as f64 - 8.0), rng.random_range(8.0..h as f64 - 8.0));
        p.disk(cx, cy, rng.random_range(4.0..5.5), COPPER, rng);
        p.disk(cx, cy, rng.random_range(1.6..2.2), DRILL, rng);
    }
    p
}

fn overlaps(a: &BBox, b: &BBox, pad: f64) -> bool {
    a.xmin < b.xmax + pad && b.xmin < a.xmax + pad && a.ymin < b.ymax + pad && b.ymin < a.ymax + pad
}

fn sample_class(weights: &[f64; NUM_CLASSES], rng: &mut ChaCha8Rng) -> DefectClass {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for c in DefectClass::ALL {
        let w = weights[c.id()];
        if u < w {
            return c;
        }
        u -= w;
    }
    // Rounding at the top of the range: last enabled class.
    *DefectClass::ALL.iter().rev().find(|c| weights[c.id()] > 0.0).unwrap()
}

/// Pastes `patch` with its top-left corner at `(x, y)`.
pub fn paste(board: &mut RgbImage, patch: &RgbImage, x: u32, y: u32) {
    for (px, py, p) in patch.enumerate_pixels() {
        board.put_pixel(x + px, y + py, *p);
    }
}

/// Picks a top-left corner for a `w x h` patch that keeps a 2px border to
/// the image edge and to every box in `taken`.
pub fn place(
    board_w: u32,
    board_h: u32,
    w: u32,
    h: u32,
    taken: &[BBox],
    rng: &mut ChaCha8Rng,
) -> Option<(u32, u32)> {
    if w + 4 > board_w || h + 4 > board_h {
        return None;
    }
    for _ in 0..PLACEMENT_TRIES {
        let x = rng.random_range(2..=board_w - w - 2);
        let y = rng.random_range(2..=board_h - h - 2);
        let b = BBox {
            xmin: x as f64,
            ymin: y as f64,
            xmax: (x + w) as f64,
            ymax: (y + h) as f64,
        };
        if !taken.iter().any(|t| overlaps(&b, t, 2.0)) {
            return Some((x, y));
        }
    }
    None
}

/// Deterministic synthetic board for `seed`.
pub fn synth_board(seed: u64, spec: &SynthSpec) -> Result<AnnotatedImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = draw_background(spec.width, spec.height, &mut rng).to_image();
    let n = rng.random_range(spec.defects_min..=spec.defects_max);
    let mut boxes: Vec<Labeled> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = sample_class(&spec.class_weights, &mut rng);
        let patch = render_defect(class, &mut rng).to_image();
        let taken: Vec<BBox> = boxes.iter().map(|l| l.bbox).collect();
        let Some((x, y)) = place(spec.width, spec.height, patch.width(), patch.height(), &taken, &mut rng) else {
            continue;
        };
        paste(&mut image, &patch, x, y);
        boxes.push(Labeled {
            bbox: BBox {
                xmin: x as f64,
                ymin: y as f64,
                xmax: (x + patch.width()) as f64,
                ymax: (y + patch.height()) as f64,
            },
            class,
        });
    }
    Ok(AnnotatedImage {
        id: format!("synth_{seed:08}"),
        image,
        boxes,
        source: ImageSource::Synthetic,
    })
}

/// A clean board (no defects) used as a compositing canvas.
pub fn blank_board(seed: u64, width: u32, height: u32) -> Result<AnnotatedImage> {
    synth_board(
        seed,
        &SynthSpec {
            width,
            height,
            defects_min: 0,
            defects_max: 0,
            ..SynthSpec::default()
        },
    )
}

/// Nearest-neighbour resize of a patch to `size x size`, as `[3, S, S]`
/// values in [0, 1].
pub fn patch_tensor(patch: &RgbImage, size: usize) -> Vec<f64> {
    let (w, h) = (patch.width() as f64, patch.height() as f64);
    let mut out = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let sx = (((x as f64 + 0.5) * w / size as f64) as u32).min(patch.width() - 1);
            let sy = (((y as f64 + 0.5) * h / size as f64) as u32).min(patch.height() - 1);
            let p = patch.get_pixel(sx, sy);
            for c in 0..3 {
                out[(c * size + y) * size + x] = p.0[c] as f64 / 255.0;
            }
        }
    }
    out
}

/// `[n, 3, size, size]` batch of freshly rendered defect patches of one class.
pub fn defect_patch_batch(class: DefectClass, n: usize, size: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 3 * size * size);
    for _ in 0..n {
        data.extend(patch_tensor(&render_defect(class, &mut rng).to_image(), size));
    }
    Tensor::new(&[n, 3, size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec::default();
        assert_eq!(synth_board(1, &spec).unwrap(), synth_board(1, &spec).unwrap());
        assert_ne!(synth_board(1, &spec).unwrap().image, synth_board(2, &spec).unwrap().image);
    }

    #[test]
    fn zero_defects() {
        let b = blank_board(3, 96, 96).unwrap();
        assert!(b.boxes.is_empty());
    }

    #[test]
    fn boxes_valid_and_disjoint() {
        let spec = SynthSpec {
            defects_min: 3,
            defects_max: 5,
            ..SynthSpec::default()
        };
        for seed in 0..200 {
            let b = synth_board(seed, &spec).unwrap();
            b.validate().unwrap();
            assert!(b.boxes.len() >= 3, "seed {seed}: placement failed");
            for (i, a) in b.boxes.iter().enumerate() {
                let (w, h) = (a.bbox.width(), a.bbox.height());
                assert!((6.0..=26.0).contains(&w) && (6.0..=26.0).contains(&h), "{:?}", a);
                for c in &b.boxes[i + 1..] {
                    assert!(!overlaps(&a.bbox, &c.bbox, 0.0));
                }
            }
        }
    }

    #[test]
    fn disabled_classes_never_drawn() {
        let mut weights = [0.0; NUM_CLASSES];
        weights[DefectClass::Short.id()] = 1.0;
        let spec = SynthSpec {
            class_weights: weights,
            ..SynthSpec::default()
        };
        for seed in 0..50 {
            assert!(synth_board(seed, &spec)
                .unwrap()
                .boxes
                .iter()
                .all(|l| l.class == DefectClass::Short));
        }
    }

    #[test]
    fn small_board_rejected() {
        let spec = SynthSpec {
            width: 32,
            ..SynthSpec::default()
        };
        assert!(synth_board(0, &spec).is_err());
    }

    #[test]
    fn patch_batch_in_unit_range() {
        let t = defect_patch_batch(DefectClass::Spur, 4, 16, 0).unwrap();
        assert_eq!(t.shape(), &[4, 3, 16, 16]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
