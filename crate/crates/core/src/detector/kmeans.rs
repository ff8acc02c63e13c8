use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AnchorSet;
use crate::error::{Error, Result};

/// IoU of two boxes sharing a center, given as `(w, h)`.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn best(b: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut out = (0, f64::NEG_INFINITY);
    for (i, &c) in centroids.iter().enumerate() {
        let iou = shape_iou(b, c);
        if iou > out.1 {
            out = (i, iou);
        }
    }
    out
}

/// Mean over boxes of the IoU with their best-matching anchor.
pub fn mean_best_iou(boxes: &[(f64, f64)], anchors: &[(f64, f64)]) -> f64 {
    boxes.iter().map(|&b| best(b, anchors).1).sum::<f64>() / boxes.len() as f64
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// k-means++ seeding under the `1 - IoU` distance.
fn seed_centroids(boxes: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centroids = vec![boxes[rng.random_range(0..boxes.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = boxes
            .iter()
            .map(|&b| {
                let d = 1.0 - best(b, &centroids).1;
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            // Fewer distinct shapes than k: duplicate the last centroid.
            centroids.push(*centroids.last().unwrap());
            continue;
        }
        let mut u = rng.random_range(0.0..total);
        let mut pick = boxes.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        centroids.push(boxes[pick]);
    }
    centroids
}

/// Lloyd iterations under `d = 1 - IoU` with per-cluster median updates.
///
/// A median update is kept only when it does not lower the cluster's total
/// IoU, so the mean best-anchor IoU never decreases between iterations. The
/// returned trace holds that mean after seeding and after every iteration.
pub fn kmeans_anchors_traced(
    boxes: &[(f64, f64)],
    k: usize,
    iters: usize,
    seed: u64,
    levels: usize,
) -> Result<(AnchorSet, Vec<f64>)> {
    if k == 0 || levels == 0 {
        return Err(Error::Parameter("k and levels must be >= 1".into()));
    }
    if boxes.len() < k {
        return Err(Error::Parameter(format!(
            "k-means needs at least k = {k} boxes, got {}",
            boxes.len()
        )));
    }
    if boxes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
        return Err(Error::Validation("box sizes must be positive and finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(boxes, k, &mut rng);
    let mut trace = vec![mean_best_iou(boxes, &centroids)];
    for _ in 0..iters {
        let assign: Vec<usize> = boxes.iter().map(|&b| best(b, &centroids).0).collect();
        let mut changed = false;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> = boxes
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(b, _)| *b)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut ws: Vec<f64> = members.iter().map(|m| m.0).collect();
            let mut hs: Vec<f64> = members.iter().map(|m| m.1).collect();
            let cand = (median(&mut ws), median(&mut hs));
            let score = |c: (f64, f64)| members.iter().map(|&m| shape_iou(m, c)).sum::<f64>();
            if cand != *centroid && score(cand) >= score(*centroid) {
                *centroid = cand;
                changed = true;
            }
        }
        trace.push(mean_best_iou(boxes, &centroids));
        if !changed {
            break;
        }
    }

    centroids.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    let per = k / levels;
    let extra = k % levels;
    let mut split = Vec::with_capacity(levels);
    let mut rest = centroids.as_slice();
    for l in 0..levels {
        let n = per + usize::from(l < extra);
        let (head, tail) = rest.split_at(n);
        split.push(head.to_vec());
        rest = tail;
    }
    Ok((AnchorSet { levels: split }, trace))
}

/// IoU-distance k-means over ground-truth `(w, h)`; the `k` centroids are
/// sorted by area and dealt to levels in order, smallest to the finest.
pub fn kmeans_anchors(
    boxes: &[(f64, f64)],
    k: usize,
    iters: usize,
    seed: u64,
    levels: usize,
) -> Result<AnchorSet> {
    kmeans_anchors_traced(boxes, k, iters, seed, levels).map(|(a, _)| a)
}
