//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls the code under test for the quantity being
//! checked; library calls only build inputs.

#![allow(dead_code)]

use std::f64::consts::PI;

use pcbdefect::data::{BBox, DefectClass, Labeled};
use pcbdefect::detector::{
    assign_targets, decode_slot, detector_forward, init_params, AnchorSet, Assignment, DecodedSlot, Detection,
    DetectorConfig, RawPrediction, Slot, Widths,
};
use pcbdefect::losses::{ciou_loss_grad, dfl_loss, focal_loss, focal_term, total_loss, ImageTargets, LossConfig};
use pcbdefect::tensor::{Activation, ConvSpec, NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

/// Finite-difference step for every gradient check.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;
pub const FIXTURES: usize = 20;

/// `|a - n| / max(|a|, |n|, 1)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub fixtures: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.fixtures >= FIXTURES && self.max_rel <= GRAD_TOL
    }
}

fn central<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], i: usize) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[i] += FD_STEP;
    m[i] -= FD_STEP;
    (f(&p) - f(&m)) / (2.0 * FD_STEP)
}

/// Coordinates to probe: all of them when few, else a seeded sample.
fn probe(n: usize, cap: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|_| r.random_range(0..n)).collect()
    }
}

fn randn(shape: &[usize], scale: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

/// Like [`randn`] but every value at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(gap..2.0);
            if r.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type Build<'a> = &'a dyn Fn(&mut Tape, &[NodeId]) -> pcbdefect::Result<NodeId>;

/// Max relative error between the tape gradient of `sum(w * op(inputs))`
/// (random fixed `w`) and central differences of the same scalar.
pub fn check_tape_op(build: Build<'_>, inputs: &[Tensor], seed: u64, cap: usize) -> f64 {
    let mut r = rng(seed);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = build(&mut tape, &ids).unwrap();
    let w = randn(tape.value(y).shape(), 1.0, &mut r);
    let wid = tape.constant(w.clone());
    let prod = tape.mul(y, wid).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let scalar = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = build(&mut t, &ids).unwrap();
        t.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]).unwrap();
        for i in probe(input.numel(), cap, &mut r) {
            let f = |x: &[f64]| {
                let mut xs = inputs.to_vec();
                xs[k] = Tensor::new(input.shape(), x.to_vec()).unwrap();
                scalar(&xs)
            };
            let num = central(&f, input.data(), i);
            worst = worst.max(rel_err(analytic.data()[i], num));
        }
    }
    worst
}

fn tape_suite(name: &'static str, fixture: impl Fn(&mut ChaCha8Rng) -> (Box<dyn Fn(&mut Tape, &[NodeId]) -> pcbdefect::Result<NodeId>>, Vec<Tensor>)) -> GradReport {
    let mut worst = 0.0f64;
    for f in 0..FIXTURES {
        let mut r = rng(0xC0FFEE ^ (f as u64) << 8 ^ name.len() as u64);
        let (build, inputs) = fixture(&mut r);
        worst = worst.max(check_tape_op(build.as_ref(), &inputs, f as u64, 40));
    }
    GradReport {
        name,
        fixtures: FIXTURES,
        max_rel: worst,
    }
}

/// Every recorded tape op, each on [`FIXTURES`] random fixtures.
pub fn tape_op_reports() -> Vec<GradReport> {
    let mut out = Vec::new();
    out.push(tape_suite("conv2d", |r| {
        let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let k = [1, 3][r.random_range(0..2)];
        let spec = ConvSpec::new(r.random_range(1..=2), r.random_range(0..=k / 2));
        let hw = r.random_range(k.max(3)..=6);
        let x = randn(&[n, cin, hw, hw], 1.0, r);
        let w = randn(&[cout, cin, k, k], 0.5, r);
        (Box::new(move |t: &mut Tape, ids: &[NodeId]| t.conv2d(ids[0], ids[1], spec)), vec![x, w])
    }));
    out.push(tape_suite("conv2d_depthwise", |r| {
        let c = r.random_range(2..=4);
        let spec = ConvSpec::grouped(r.random_range(1..=2), 1, c);
        let x = randn(&[2, c, 5, 5], 1.0, r);
        let w = randn(&[c, 1, 3, 3], 0.5, r);
        (Box::new(move |t: &mut Tape, ids: &[NodeId]| t.conv2d(ids[0], ids[1], spec)), vec![x, w])
    }));
    out.push(tape_suite("conv_transpose2d", |r| {
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let (k, s, p) = [(4, 2, 1), (3, 1, 1), (2, 2, 0), (3, 2, 0)][r.random_range(0..4)];
        let x = randn(&[2, cin, 3, 3], 1.0, r);
        let w = randn(&[cin, cout, k, k], 0.5, r);
        let spec = ConvSpec::new(s, p);
        (Box::new(move |t: &mut Tape, ids: &[NodeId]| t.conv_transpose2d(ids[0], ids[1], spec)), vec![x, w])
    }));
    out.push(tape_suite("add_bias", |r| {
        let c = r.random_range(1..=4);
        let x = randn(&[2, c, 3, 2], 1.0, r);
        let b = randn(&[c], 1.0, r);
        (Box::new(|t: &mut Tape, ids: &[NodeId]| t.add_bias(ids[0], ids[1])), vec![x, b])
    }));
    out.push(tape_suite("add", |r| {
        let shape = [r.random_range(1..=3), r.random_range(1..=4)];
        let (a, b) = (randn(&shape, 1.0, r), randn(&shape, 1.0, r));
        (Box::new(|t: &mut Tape, ids: &[NodeId]| t.add(ids[0], ids[1])), vec![a, b])
    }));
    out.push(tape_suite("mul", |r| {
        let shape = [r.random_range(1..=3), r.random_range(1..=4)];
        let (a, b) = (randn(&shape, 2.0, r), randn(&shape, 2.0, r));
        (Box::new(|t: &mut Tape, ids: &[NodeId]| t.mul(ids[0], ids[1])), vec![a, b])
    }));
    out.push(tape_suite("scale", |r| {
        let f = r.random_range(-3.0..3.0);
        let x = randn(&[4, 3], 1.0, r);
        (Box::new(move |t: &mut Tape, ids: &[NodeId]| t.scale(ids[0], f)), vec![x])
    }));
    for (name, kind) in [
        ("leaky_relu", Activation::LeakyRelu),
        ("sigmoid", Activation::Sigmoid),
        ("silu", Activation::Silu),
    ] {
        out.push(tape_suite(name, move |r| {
            // Kink of the leaky ReLU kept well outside the probe step.
            let x = away_from_zero(&[3, 5], 1e-2, r);
            (Box::new(move |t: &mut Tape, ids: &[NodeId]| t.activation(ids[0], kind)), vec![x])
        }));
    }
    out.push(tape_suite("upsample_nearest", |r| {
        let factor = r.random_range(2..=3);
        let x = randn(&[1, 2, 3, 2], 1.0, r);
        (Box::new(move |t: &mut Tape, ids: &[NodeId]| t.upsample_nearest(ids[0], factor)), vec![x])
    }));
    out.push(tape_suite("reshape", |r| {
        let x = randn(&[2, 3, 2], 1.0, r);
        // Reshape alone is linear with identity Jacobian; square it so the
        // gradient depends on the values.
        (
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let y = t.reshape(ids[0], &[3, 4])?;
                t.mul(y, y)
            }),
            vec![x],
        )
    }));
    out.push(tape_suite("matmul", |r| {
        let (m, k, n) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
        let (a, b) = (randn(&[m, k], 1.0, r), randn(&[k, n], 1.0, r));
        (Box::new(|t: &mut Tape, ids: &[NodeId]| t.matmul(ids[0], ids[1])), vec![a, b])
    }));
    out.push(tape_suite("sum", |r| {
        let x = randn(&[3, 4], 1.0, r);
        (
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let sq = t.mul(ids[0], ids[0])?;
                t.sum(sq)
            }),
            vec![x],
        )
    }));
    out.push(tape_suite("mean", |r| {
        let x = randn(&[2, 5], 1.0, r);
        (
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let sq = t.mul(ids[0], ids[0])?;
                t.mean(sq)
            }),
            vec![x],
        )
    }));
    out.push(tape_suite("batch_norm", |r| {
        let c = r.random_range(1..=3);
        let x = randn(&[r.random_range(2..=3), c, 2, 3], 2.0, r);
        let gamma = randn(&[c], 1.5, r);
        let beta = randn(&[c], 1.0, r);
        (
            Box::new(|t: &mut Tape, ids: &[NodeId]| t.batch_norm(ids[0], ids[1], ids[2], 1e-5)),
            vec![x, gamma, beta],
        )
    }));
    out.push(tape_suite("scalar_op", |r| {
        // f(x) = sum x^3 with its gradient supplied by the caller, chained
        // through a scale so the upstream gradient is not 1.
        let x = randn(&[2, 3], 1.0, r);
        (
            Box::new(|t: &mut Tape, ids: &[NodeId]| {
                let v = t.value(ids[0]).clone();
                let value = v.data().iter().map(|a| a * a * a).sum();
                let g = Tensor::new(v.shape(), v.data().iter().map(|a| 3.0 * a * a).collect())?;
                let s = t.scalar_op(&[ids[0]], value, vec![g])?;
                t.scale(s, -1.7)
            }),
            vec![x],
        )
    }));
    out.push(network_report());
    out
}

/// The whole detector forward pass, probing sampled parameters.
fn network_report() -> GradReport {
    let cfg = DetectorConfig {
        input_size: 32,
        num_classes: 2,
        anchors_per_scale: 1,
        dfl_bins: 3,
        widths: Widths {
            stem: 4,
            stage8: 4,
            stage16: 6,
            head: 4,
        },
        ..DetectorConfig::default()
    };
    let mut worst = 0.0f64;
    for f in 0..FIXTURES {
        let mut r = rng(500 + f as u64);
        let params = init_params(&cfg, f as u64).unwrap();
        let names: Vec<String> = params.names().cloned().collect();
        let tensors: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
        let x = Tensor::new(&[1, 3, 32, 32], (0..3 * 32 * 32).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let cfg2 = cfg.clone();
        let names2 = names.clone();
        let build = move |t: &mut Tape, ids: &[NodeId]| {
            let map = names2.iter().cloned().zip(ids.iter().copied()).collect();
            let xi = t.constant(x.clone());
            let heads = detector_forward(t, &map, xi, &cfg2)?;
            let flat: Vec<NodeId> = heads
                .iter()
                .map(|&h| {
                    let n = t.value(h).numel();
                    t.reshape(h, &[1, n])
                })
                .collect::<pcbdefect::Result<_>>()?;
            let s0 = t.mul(flat[0], flat[0])?;
            let s1 = t.mul(flat[1], flat[1])?;
            let a = t.sum(s0)?;
            let b = t.sum(s1)?;
            t.add(a, b)
        };
        // Probe a couple of entries in each parameter tensor.
        worst = worst.max(check_tape_op(&build, &tensors, f as u64, 2));
    }
    GradReport {
        name: "detector_network",
        fixtures: FIXTURES,
        max_rel: worst,
    }
}

/// Reference CIoU loss with `alpha` supplied by the caller.
pub fn ciou_reference(p: [f64; 4], g: [f64; 4], alpha: Option<f64>) -> f64 {
    const EPS: f64 = 1e-9;
    let (w, h) = (p[2] - p[0], p[3] - p[1]);
    let (gw, gh) = (g[2] - g[0], g[3] - g[1]);
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
    let inter = iw * ih;
    let iou = inter / (w * h + gw * gh - inter + EPS);
    let dx = (p[0] + p[2] - g[0] - g[2]) / 2.0;
    let dy = (p[1] + p[3] - g[1] - g[3]) / 2.0;
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let v = 4.0 / (PI * PI) * ((gw / (gh + EPS)).atan() - (w / (h + EPS)).atan()).powi(2);
    let alpha = alpha.unwrap_or(v / ((1.0 - iou) + v + EPS));
    1.0 - iou + (dx * dx + dy * dy) / (cw * cw + ch * ch + EPS) + alpha * v
}

/// The `alpha` of [`ciou_reference`] at a point.
pub fn ciou_alpha(p: [f64; 4], g: [f64; 4]) -> f64 {
    const EPS: f64 = 1e-9;
    let (w, h) = (p[2] - p[0], p[3] - p[1]);
    let (gw, gh) = (g[2] - g[0], g[3] - g[1]);
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
    let inter = iw * ih;
    let iou = inter / (w * h + gw * gh - inter + EPS);
    let v = 4.0 / (PI * PI) * ((gw / (gh + EPS)).atan() - (w / (h + EPS)).atan()).powi(2);
    v / ((1.0 - iou) + v + EPS)
}

fn arr(b: &BBox) -> [f64; 4] {
    [b.xmin, b.ymin, b.xmax, b.ymax]
}

fn bbox(a: [f64; 4]) -> BBox {
    BBox::new(a[0], a[1], a[2], a[3]).unwrap()
}

/// A random box whose edges stay at least `gap` from every edge of `avoid`.
fn random_box(r: &mut ChaCha8Rng, avoid: Option<[f64; 4]>, gap: f64) -> [f64; 4] {
    loop {
        let x = r.random_range(0.0..20.0);
        let y = r.random_range(0.0..20.0);
        let b = [x, y, x + r.random_range(1.0..12.0), y + r.random_range(1.0..12.0)];
        let ok = avoid.is_none_or(|a| {
            [0, 2].iter().all(|&i| [0, 2].iter().all(|&j| (b[i] - a[j]).abs() > gap))
                && [1, 3].iter().all(|&i| [1, 3].iter().all(|&j| (b[i] - a[j]).abs() > gap))
        });
        if ok {
            return b;
        }
    }
}

/// CIoU against central differences of the reference with `alpha` frozen.
pub fn ciou_report() -> GradReport {
    let mut worst = 0.0f64;
    let mut r = rng(11);
    for _ in 0..FIXTURES * 5 {
        let g = random_box(&mut r, None, 0.0);
        let p = random_box(&mut r, Some(g), 1e-3);
        let (value, grad) = ciou_loss_grad(&bbox(p), &bbox(g));
        let alpha = ciou_alpha(p, g);
        // Value equality shows the reference is the same function.
        worst = worst.max(rel_err(value, ciou_reference(p, g, None)));
        let f = |x: &[f64]| ciou_reference([x[0], x[1], x[2], x[3]], g, Some(alpha));
        for i in 0..4 {
            worst = worst.max(rel_err(grad[i], central(&f, &p, i)));
        }
    }
    GradReport {
        name: "ciou_loss",
        fixtures: FIXTURES * 5,
        max_rel: worst,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reference focal loss of one logit against a (possibly soft) target.
pub fn focal_reference(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let w = alpha * t + (1.0 - alpha) * (1.0 - t);
    -w * (t - p).abs().powf(gamma) * (t * p.max(1e-12).ln() + (1.0 - t) * (1.0 - p).max(1e-12).ln())
}

pub fn focal_report() -> GradReport {
    let mut worst = 0.0f64;
    for f in 0..FIXTURES {
        let mut r = rng(100 + f as u64);
        let (rows, classes) = (r.random_range(1..=5), r.random_range(1..=4));
        let logits = randn(&[rows, classes], 4.0, &mut r);
        let targets: Vec<Option<usize>> = (0..rows)
            .map(|_| r.random_bool(0.5).then(|| r.random_range(0..classes)))
            .collect();
        let (alpha, gamma) = (r.random_range(0.05..0.95), [0.0, 1.0, 1.5, 2.0, 3.0][f % 5]);
        let (value, grad) = focal_loss(&logits, &targets, alpha, gamma).unwrap();
        let reference = |x: &[f64]| {
            let mut s = 0.0;
            for row in 0..rows {
                for c in 0..classes {
                    let t = if targets[row] == Some(c) { 1.0 } else { 0.0 };
                    s += focal_reference(x[row * classes + c], t, alpha, gamma);
                }
            }
            s / rows as f64
        };
        worst = worst.max(rel_err(value, reference(logits.data())));
        for i in 0..logits.numel() {
            worst = worst.max(rel_err(grad.data()[i], central(&reference, logits.data(), i)));
        }
        // Soft targets, as used for the objectness logit.
        for _ in 0..5 {
            let (x, t) = (r.random_range(-5.0..5.0), r.random_range(0.0..1.0));
            let (v, d) = focal_term(x, t, alpha, 2.0);
            let f1 = |a: &[f64]| focal_reference(a[0], t, alpha, 2.0);
            worst = worst.max(rel_err(v, f1(&[x]))).max(rel_err(d, central(&f1, &[x], 0)));
        }
    }
    GradReport {
        name: "focal_loss",
        fixtures: FIXTURES,
        max_rel: worst,
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Reference DFL for a target already inside `[0, bins - 1]`.
pub fn dfl_reference(x: &[f64], y: f64) -> f64 {
    let i = (y.floor() as usize).min(x.len() - 2);
    let lp = log_softmax(x);
    -(((i + 1) as f64 - y) * lp[i] + (y - i as f64) * lp[i + 1])
}

pub fn dfl_report() -> GradReport {
    let mut worst = 0.0f64;
    for f in 0..FIXTURES {
        let mut r = rng(200 + f as u64);
        let bins = r.random_range(2..=16);
        let logits: Vec<f64> = (0..bins).map(|_| r.random_range(-3.0..3.0)).collect();
        let y = if f % 4 == 0 {
            r.random_range(0..bins) as f64
        } else {
            r.random_range(0.0..(bins - 1) as f64)
        };
        let (value, grad, clamped) = dfl_loss(&logits, y);
        assert!(!clamped);
        let reference = |x: &[f64]| dfl_reference(x, y);
        worst = worst.max(rel_err(value, reference(&logits)));
        for i in 0..bins {
            worst = worst.max(rel_err(grad[i], central(&reference, &logits, i)));
        }
    }
    GradReport {
        name: "dfl_loss",
        fixtures: FIXTURES,
        max_rel: worst,
    }
}

/// Small head layout for loss fixtures.
pub fn loss_cfg() -> DetectorConfig {
    DetectorConfig {
        input_size: 32,
        num_classes: 3,
        anchors_per_scale: 2,
        dfl_bins: 6,
        ..DetectorConfig::default()
    }
}

pub fn random_gts(r: &mut ChaCha8Rng, n: usize, size: f64, classes: usize) -> Vec<Labeled> {
    (0..n)
        .map(|_| {
            let w = r.random_range(4.0..14.0);
            let h = r.random_range(4.0..14.0);
            let x = r.random_range(0.0..size - w);
            let y = r.random_range(0.0..size - h);
            Labeled {
                bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                class: DefectClass::from_id(r.random_range(0..classes)).unwrap(),
            }
        })
        .collect()
}

/// Everything the total-loss reference holds fixed at the base point.
struct Frozen {
    assignments: Vec<Assignment>,
    obj_targets: Vec<Vec<f64>>,
    alphas: Vec<Vec<f64>>,
}

fn reference_total(
    levels: &[Tensor],
    cfg: &DetectorConfig,
    gts: &[Vec<Labeled>],
    weights: &[f64],
    frozen: &Frozen,
    lc: &LossConfig,
) -> [f64; 4] {
    let raw = RawPrediction {
        levels: levels.to_vec(),
    };
    let slots: Vec<Slot> = cfg.slots();
    let bins = cfg.dfl_bins;
    let n_pos: usize = frozen.assignments.iter().map(|a| a.num_positive()).sum();
    let norm = 1.0 / n_pos.max(1) as f64;
    let (mut bx, mut cl, mut df) = (0.0, 0.0, 0.0);
    for b in 0..gts.len() {
        for (si, slot) in slots.iter().enumerate() {
            let x: Vec<f64> = (0..cfg.per_anchor()).map(|ch| raw.levels[slot.level].data()[raw.index(cfg, b, slot, ch)]).collect();
            let target = frozen.assignments[b].slots[si];
            cl += weights[b] * focal_reference(x[4 * bins], frozen.obj_targets[b][si], lc.focal_alpha, lc.focal_gamma);
            let gc = target.map(|g| gts[b][g].class.id());
            for c in 0..cfg.num_classes {
                let t = if gc == Some(c) { 1.0 } else { 0.0 };
                cl += weights[b] * focal_reference(x[4 * bins + 1 + c], t, lc.focal_alpha, lc.focal_gamma);
            }
            if let Some(g) = target {
                let gt = arr(&gts[b][g].bbox);
                let st = slot.stride;
                let (cx, cy) = ((slot.gx as f64 + 0.5) * st, (slot.gy as f64 + 0.5) * st);
                let e: Vec<f64> = (0..4)
                    .map(|s| {
                        let lp = log_softmax(&x[s * bins..(s + 1) * bins]);
                        lp.iter().enumerate().map(|(j, l)| j as f64 * l.exp()).sum()
                    })
                    .collect();
                let p = [cx - e[0] * st, cy - e[1] * st, cx + e[2] * st, cy + e[3] * st];
                bx += weights[b] * ciou_reference(p, gt, Some(frozen.alphas[b][si]));
                let ys = [(cx - gt[0]) / st, (cy - gt[1]) / st, (gt[2] - cx) / st, (gt[3] - cy) / st];
                for s in 0..4 {
                    let y = ys[s].clamp(0.0, (bins - 1) as f64);
                    df += weights[b] * dfl_reference(&x[s * bins..(s + 1) * bins], y) / 4.0;
                }
            }
        }
    }
    let w = &lc.weights;
    [bx * norm, cl * norm, df * norm, (w.w_box * bx + w.w_cls * cl + w.w_dfl * df) * norm]
}

/// One total-loss fixture: its library output against the reference.
pub fn total_loss_fixture(seed: u64) -> f64 {
    let cfg = loss_cfg();
    let lc = LossConfig::default();
    let mut r = rng(seed);
    let batch = 2;
    let levels: Vec<Tensor> = (0..2)
        .map(|l| randn(&[batch, cfg.head_channels(), cfg.grid(l), cfg.grid(l)], 2.0, &mut r))
        .collect();
    let raw = RawPrediction { levels: levels.clone() };
    let slots = cfg.slots();
    let gts: Vec<Vec<Labeled>> = (0..batch).map(|_| {
        let n = r.random_range(0..=3);
        random_gts(&mut r, n, 32.0, cfg.num_classes)
    }).collect();
    let weights: Vec<f64> = (0..batch).map(|_| [1.0, 0.5, 2.0][r.random_range(0..3)]).collect();
    let decoded: Vec<Vec<DecodedSlot>> = (0..batch)
        .map(|b| slots.iter().map(|s| decode_slot(&raw, &cfg, b, s)).collect())
        .collect();
    let anchors = AnchorSet::uniform(&cfg);
    let assignments: Vec<Assignment> = (0..batch)
        .map(|b| assign_targets(&gts[b], &anchors, &slots, &decoded[b]))
        .collect();
    let mut frozen = Frozen {
        assignments: assignments.clone(),
        obj_targets: vec![vec![0.0; slots.len()]; batch],
        alphas: vec![vec![0.0; slots.len()]; batch],
    };
    for b in 0..batch {
        for (si, g) in assignments[b].positives() {
            let p = arr(&decoded[b][si].bbox);
            let gt = arr(&gts[b][g].bbox);
            let iw = (p[2].min(gt[2]) - p[0].max(gt[0])).max(0.0);
            let ih = (p[3].min(gt[3]) - p[1].max(gt[1])).max(0.0);
            let inter = iw * ih;
            let union = (p[2] - p[0]) * (p[3] - p[1]) + (gt[2] - gt[0]) * (gt[3] - gt[1]) - inter;
            frozen.obj_targets[b][si] = if inter > 0.0 { inter / union } else { 0.0 };
            frozen.alphas[b][si] = ciou_alpha(p, gt);
        }
    }
    let images: Vec<ImageTargets<'_>> = (0..batch)
        .map(|b| ImageTargets {
            gts: &gts[b],
            assignment: &assignments[b],
            decoded: &decoded[b],
            weight: weights[b],
        })
        .collect();
    let out = total_loss(&raw, &cfg, &images, &lc).unwrap();
    let base = reference_total(&levels, &cfg, &gts, &weights, &frozen, &lc);
    let parts = [out.parts.box_loss, out.parts.cls, out.parts.dfl, out.parts.total];
    let mut worst = (0..4).map(|i| rel_err(parts[i], base[i])).fold(0.0, f64::max);

    // Probe every channel of up to two positive slots, plus random entries.
    let mut probes: Vec<(usize, usize)> = Vec::new();
    for b in 0..batch {
        for (si, _) in assignments[b].positives().take(2) {
            for ch in 0..cfg.per_anchor() {
                probes.push((slots[si].level, raw.index(&cfg, b, &slots[si], ch)));
            }
        }
    }
    for _ in 0..20 {
        let l = r.random_range(0..2);
        probes.push((l, r.random_range(0..levels[l].numel())));
    }
    for (l, i) in probes {
        let f = |x: &[f64]| {
            let mut lv = levels.clone();
            lv[l] = Tensor::new(levels[l].shape(), x.to_vec()).unwrap();
            reference_total(&lv, &cfg, &gts, &weights, &frozen, &lc)[3]
        };
        worst = worst.max(rel_err(out.grads[l].data()[i], central(&f, levels[l].data(), i)));
    }
    worst
}

pub fn total_loss_report() -> GradReport {
    let worst = (0..FIXTURES as u64).map(|s| total_loss_fixture(300 + s)).fold(0.0, f64::max);
    GradReport {
        name: "total_loss",
        fixtures: FIXTURES,
        max_rel: worst,
    }
}

pub fn all_gradient_reports() -> Vec<GradReport> {
    let mut out = tape_op_reports();
    out.push(focal_report());
    out.push(ciou_report());
    out.push(dfl_report());
    out.push(total_loss_report());
    out
}

// --------------------------------------------------------------------- NMS

/// IoU by direct area arithmetic.
pub fn iou_reference(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let iy = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |x: &BBox| (x.xmax - x.xmin) * (x.ymax - x.ymin);
    inter / (area(a) + area(b) - inter)
}

/// True when detection `a` outranks `b` (score, then smaller area, then
/// index).
fn outranks(dets: &[Detection], a: usize, b: usize) -> bool {
    let area = |d: &Detection| (d.bbox.xmax - d.bbox.xmin) * (d.bbox.ymax - d.bbox.ymin);
    let (da, db) = (&dets[a], &dets[b]);
    if da.score != db.score {
        return da.score > db.score;
    }
    if area(da) != area(db) {
        return area(da) < area(db);
    }
    a < b
}

/// O(n^2) NMS: repeatedly take the best live detection and kill every live
/// same-class detection overlapping it above the threshold.
pub fn nms_reference(dets: &[Detection], thresh: f64) -> Vec<usize> {
    let mut live = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if live[i] && best.is_none_or(|b| outranks(dets, i, b)) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        live[b] = false;
        kept.push(b);
        for j in 0..dets.len() {
            if live[j] && dets[j].class == dets[b].class && iou_reference(&dets[j].bbox, &dets[b].bbox) > thresh {
                live[j] = false;
            }
        }
    }
    kept
}

/// Random detections with deliberately frequent score and area ties.
pub fn random_detections(r: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = r.random_range(0..60) as f64;
            let y = r.random_range(0..60) as f64;
            let w = r.random_range(2..20) as f64;
            let h = r.random_range(2..20) as f64;
            let score = if r.random_bool(0.3) {
                r.random_range(1..=5) as f64 / 5.0
            } else {
                r.random_range(0.0..1.0)
            };
            Detection {
                bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                class: DefectClass::from_id(r.random_range(0..3)).unwrap(),
                score,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------- AP

/// Matches one image's detections of one class against its gts in score
/// order, recomputed from scratch for the given detection subset.
fn greedy_tp(dets: &[Detection], members: &[usize], gts: &[Labeled], class: DefectClass, tau: f64) -> Vec<bool> {
    let gt_idx: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].class == class).collect();
    let mut used = vec![false; gts.len()];
    let mut order = members.to_vec();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut tp = vec![false; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for &g in &gt_idx {
            if used[g] {
                continue;
            }
            let v = iou_reference(&dets[i].bbox, &gts[g].bbox);
            if v >= tau && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp[i] = true;
        }
    }
    tp
}

/// AP by enumerating every cut-off: for each prefix of the global ranking
/// the prefix is re-matched from scratch, then each of the 101 recall
/// levels takes the best precision among prefixes reaching it.
pub fn ap_reference(dets: &[Vec<Detection>], gts: &[Vec<Labeled>], class: DefectClass, tau: f64) -> f64 {
    let n_gt: usize = gts.iter().flatten().filter(|l| l.class == class).count();
    if n_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        for (i, det) in d.iter().enumerate() {
            if det.class == class {
                ranked.push((img, i));
            }
        }
    }
    ranked.sort_by(|a, b| dets[b.0][b.1].score.partial_cmp(&dets[a.0][a.1].score).unwrap());
    let mut prefix: Vec<(usize, f64)> = Vec::new();
    for k in 1..=ranked.len() {
        let mut tp = 0;
        for img in 0..dets.len() {
            let members: Vec<usize> = ranked[..k].iter().filter(|x| x.0 == img).map(|x| x.1).collect();
            tp += greedy_tp(&dets[img], &members, &gts[img], class, tau).iter().filter(|t| **t).count();
        }
        prefix.push((tp, tp as f64 / k as f64));
    }
    let mut sum = 0.0;
    for level in 0..=100usize {
        let mut best = 0.0f64;
        for &(tp, p) in &prefix {
            if tp * 100 >= level * n_gt {
                best = best.max(p);
            }
        }
        sum += best;
    }
    sum / 101.0
}

/// `(per-class AP at each threshold, mAP50, mAP50-95)` by brute force.
pub fn map_reference(dets: &[Vec<Detection>], gts: &[Vec<Labeled>]) -> (Vec<(DefectClass, Vec<f64>)>, f64, f64) {
    let taus: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut per = Vec::new();
    for class in DefectClass::ALL {
        if gts.iter().flatten().any(|l| l.class == class) {
            per.push((class, taus.iter().map(|&t| ap_reference(dets, gts, class, t)).collect::<Vec<_>>()));
        }
    }
    let n = per.len().max(1) as f64;
    let map50 = per.iter().map(|(_, a)| a[0]).sum::<f64>() / n;
    let map = per.iter().map(|(_, a)| a.iter().sum::<f64>() / a.len() as f64).sum::<f64>() / n;
    (per, map50, map)
}

/// Small random evaluation instance: up to 5 dets and 5 gts per image,
/// classes 0 and 1, distinct scores. Detections are jittered copies of
/// gts or free boxes so every IoU threshold sees hits and misses.
pub fn random_eval_instance(r: &mut ChaCha8Rng, images: usize) -> (Vec<Vec<Detection>>, Vec<Vec<Labeled>>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let ng = r.random_range(0..=5);
        let g = random_gts(r, ng, 40.0, 2);
        let nd = r.random_range(0..=5);
        let d: Vec<Detection> = (0..nd)
            .map(|_| {
                let (bbox, class) = if !g.is_empty() && r.random_bool(0.7) {
                    let src = g[r.random_range(0..g.len())];
                    let j = |r: &mut ChaCha8Rng| r.random_range(-2.0..2.0);
                    let b = src.bbox;
                    let (x0, y0) = (b.xmin + j(r), b.ymin + j(r));
                    let bb = BBox::new(x0, y0, (b.xmax + j(r)).max(x0 + 1.0), (b.ymax + j(r)).max(y0 + 1.0)).unwrap();
                    let cls = if r.random_bool(0.85) { src.class } else { DefectClass::from_id(1 - src.class.id()).unwrap() };
                    (bb, cls)
                } else {
                    let l = random_gts(r, 1, 40.0, 2)[0];
                    (l.bbox, l.class)
                };
                Detection {
                    bbox,
                    class,
                    score: r.random_range(0.0..1.0),
                }
            })
            .collect();
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

// -------------------------------------------------------------------- Nadam

/// Scalar Nadam written out from the recurrence.
pub struct NadamReference {
    pub theta: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl NadamReference {
    pub fn new(theta: f64) -> Self {
        NadamReference { theta, m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, g: f64, lr: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        self.theta -= lr / (vh.sqrt() + eps) * (b1 * mh + (1.0 - b1) * g / (1.0 - b1.powi(self.t)));
    }
}

// --------------------------------------------------------------- assignment

/// The dynamic-k rule evaluated directly: candidate matrix, per-gt k,
/// rank-based selection, conflict resolution, then sequential fallback.
pub fn assign_reference(gts: &[Labeled], anchors: &AnchorSet, slots: &[Slot], decoded: &[DecodedSlot]) -> Vec<Option<usize>> {
    let n = slots.len();
    let inside = |s: &Slot, g: &Labeled| {
        let (cx, cy) = ((s.gx as f64 + 0.5) * s.stride, (s.gy as f64 + 0.5) * s.stride);
        cx > g.bbox.xmin && cx < g.bbox.xmax && cy > g.bbox.ymin && cy < g.bbox.ymax
    };
    // claim[i] = (gt, alignment) of the strongest selection of slot i.
    let mut claim: Vec<Option<(usize, f64)>> = vec![None; n];
    for (g, gt) in gts.iter().enumerate() {
        let cand: Vec<usize> = (0..n).filter(|&i| inside(&slots[i], gt)).collect();
        if cand.is_empty() {
            continue;
        }
        let ov = |i: usize| iou_reference(&decoded[i].bbox, &gt.bbox);
        let align = |i: usize| decoded[i].class_probs[gt.class.id()] * ov(i);
        let mut ious: Vec<f64> = cand.iter().map(|&i| ov(i)).collect();
        ious.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = (ious.iter().take(10).sum::<f64>().round() as usize).clamp(1, 10);
        for &i in &cand {
            let rank = cand
                .iter()
                .filter(|&&j| align(j) > align(i) || (align(j) == align(i) && j < i))
                .count();
            if rank < k && claim[i].is_none_or(|(_, a)| align(i) > a) {
                claim[i] = Some((g, align(i)));
            }
        }
    }
    let mut out: Vec<Option<usize>> = claim.iter().map(|c| c.map(|x| x.0)).collect();
    for g in 0..gts.len() {
        if out.contains(&Some(g)) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if out[i].is_none() {
                let v = iou_reference(&anchors.prior_box(&slots[i]), &gts[g].bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        if let Some((i, _)) = best {
            out[i] = Some(g);
        }
    }
    out
}

/// Random decoded slots for assignment fixtures.
pub fn random_decoded(r: &mut ChaCha8Rng, slots: &[Slot], classes: usize) -> Vec<DecodedSlot> {
    slots
        .iter()
        .map(|s| {
            let (cx, cy) = ((s.gx as f64 + 0.5) * s.stride, (s.gy as f64 + 0.5) * s.stride);
            let sides: [f64; 4] = std::array::from_fn(|_| r.random_range(0.1..2.0));
            let mut probs: Vec<f64> = (0..classes).map(|_| r.random_range(0.01..1.0)).collect();
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            DecodedSlot {
                bbox: BBox {
                    xmin: cx - sides[0] * s.stride,
                    ymin: cy - sides[1] * s.stride,
                    xmax: cx + sides[2] * s.stride,
                    ymax: cy + sides[3] * s.stride,
                },
                sides,
                side_probs: std::array::from_fn(|_| vec![1.0]),
                objectness: r.random_range(0.0..1.0),
                class_probs: probs,
            }
        })
        .collect()
}

// ------------------------------------------------------------------ report

/// Checks the text table against the fixed column set and the JSON round
/// trip; `Err` names the first mismatch.
pub fn check_report(report: &pcbdefect::evaluate::EvalReport) -> Result<(), String> {
    use pcbdefect::evaluate::{render_from_json, report_json, report_table};
    let txt = report_table(report);
    let mut lines = txt.lines();
    let header = lines.next().ok_or("empty table")?;
    if header != "Class\tImages\tInstances\tP\tR\tmAP50\tmAP50-95" {
        return Err(format!("header {header:?}"));
    }
    let rows: Vec<&str> = lines.collect();
    if rows.len() != report.rows.len() || rows.first().is_none_or(|r| !r.starts_with("all\t")) {
        return Err("rows must start with `all` and cover every class row".into());
    }
    for row in &rows {
        let cells: Vec<&str> = row.split('\t').collect();
        if cells.len() != 7 {
            return Err(format!("row {row:?} has {} cells", cells.len()));
        }
        cells[1].parse::<usize>().map_err(|_| format!("images in {row:?}"))?;
        cells[2].parse::<usize>().map_err(|_| format!("instances in {row:?}"))?;
        for c in &cells[3..] {
            let v: f64 = c.parse().map_err(|_| format!("number {c:?}"))?;
            if !(0.0..=1.0).contains(&v) || c.split('.').nth(1).map(str::len) != Some(2) {
                return Err(format!("metric {c:?} must be two decimals in [0, 1]"));
            }
        }
    }
    let json = report_json(report).map_err(|e| e.to_string())?;
    if render_from_json(&json).map_err(|e| e.to_string())? != txt {
        return Err("JSON round trip renders differently".into());
    }
    Ok(())
}
