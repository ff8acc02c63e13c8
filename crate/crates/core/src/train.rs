//! Detector training loop, batched inference and threshold calibration.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{component_seed, TrainConfig};
use crate::data::augment::fit_canvas;
use crate::data::{apply_augmentations, batch_images, AnnotatedImage, ImageSource, Labeled};
use crate::detector::{
    assign_targets, decode_predictions, decode_slot, detector_forward, kmeans_anchors, AnchorSet, DecodedSlot,
    Detection, Detector, RawPrediction,
};
use crate::error::{Error, Result};
use crate::evaluate::CurveRow;
use crate::losses::{total_loss, ImageTargets, LossParts};
use crate::optim::{cosine_lr, nadam_step, CosineSchedule, OptState};
use crate::postprocess::{calibrate_thresholds, nms, ThresholdSet, DEFAULT_MATCH_IOU};
use crate::tensor::{NodeId, Tape, Tensor};

/// Detections scoring below this are dropped before NMS.
pub const SCORE_FLOOR: f64 = 1e-3;
/// Images per inference forward pass.
const INFER_CHUNK: usize = 16;

/// k-means anchors over the training boxes; square `4 * stride` priors when
/// there are fewer boxes than anchors.
pub fn fit_anchors(train: &[AnnotatedImage], cfg: &TrainConfig, seed: u64) -> Result<AnchorSet> {
    let det = &cfg.detector;
    let boxes: Vec<(f64, f64)> = train
        .iter()
        .flat_map(|im| im.boxes.iter().map(|l| (l.bbox.width(), l.bbox.height())))
        .collect();
    let k = det.anchors_per_scale * det.num_levels();
    if boxes.len() < k {
        return Ok(AnchorSet::uniform(det));
    }
    kmeans_anchors(&boxes, k, cfg.kmeans_iters, seed, det.num_levels())
}

fn check_sizes(images: &[&AnnotatedImage], size: usize) -> Result<()> {
    for im in images {
        if im.width() as usize != size || im.height() as usize != size {
            return Err(Error::Shape(format!(
                "{} is {}x{}, detector input is {size}x{size}",
                im.id,
                im.width(),
                im.height()
            )));
        }
    }
    Ok(())
}

/// Loss of one batch; with `grad` also the parameter gradients.
pub fn batch_loss(
    det: &Detector,
    images: &[&AnnotatedImage],
    cfg: &TrainConfig,
    grad: bool,
) -> Result<(LossParts, Option<BTreeMap<String, Tensor>>)> {
    let dc = &det.config;
    check_sizes(images, dc.input_size)?;
    let mut tape = Tape::new();
    let ids: BTreeMap<String, NodeId> = if grad {
        det.params.register(&mut tape)
    } else {
        det.params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect()
    };
    let x = tape.constant(batch_images(images.iter().map(|im| &im.image))?);
    let heads = detector_forward(&mut tape, &ids, x, dc)?;
    let raw = RawPrediction {
        levels: heads.iter().map(|&h| tape.value(h).clone()).collect(),
    };
    let slots = dc.slots();
    let decoded: Vec<Vec<DecodedSlot>> = (0..images.len())
        .map(|b| slots.iter().map(|s| decode_slot(&raw, dc, b, s)).collect())
        .collect();
    let assignments: Vec<_> = images
        .iter()
        .zip(&decoded)
        .map(|(im, d)| assign_targets(&im.boxes, &det.anchors, &slots, d))
        .collect();
    let targets: Vec<ImageTargets<'_>> = images
        .iter()
        .zip(&assignments)
        .zip(&decoded)
        .map(|((im, a), d)| ImageTargets {
            gts: &im.boxes,
            assignment: a,
            decoded: d,
            weight: if im.source == ImageSource::GanComposited { cfg.loss.gan_multiplier } else { 1.0 },
        })
        .collect();
    let out = total_loss(&raw, dc, &targets, &cfg.loss)?;
    if !grad {
        return Ok((out.parts, None));
    }
    let node = tape.scalar_op(&heads, out.parts.total, out.grads)?;
    let grads = tape.backward(node)?.by_name(&ids);
    Ok((out.parts, Some(grads)))
}

/// Batch-size-weighted mean of loss parts over `images`, no gradients.
pub fn dataset_loss(det: &Detector, images: &[AnnotatedImage], cfg: &TrainConfig) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for chunk in images.chunks(INFER_CHUNK) {
        let refs: Vec<&AnnotatedImage> = chunk.iter().collect();
        let (p, _) = batch_loss(det, &refs, cfg, false)?;
        accumulate(&mut acc, &p, chunk.len() as f64 / images.len() as f64);
    }
    Ok(acc)
}

fn accumulate(acc: &mut LossParts, p: &LossParts, w: f64) {
    acc.box_loss += w * p.box_loss;
    acc.cls += w * p.cls;
    acc.dfl += w * p.dfl;
    acc.total += w * p.total;
}

/// Post-NMS detections per image, unthresholded apart from [`SCORE_FLOOR`].
pub fn detect_images(det: &Detector, images: &[AnnotatedImage], nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        let refs: Vec<&AnnotatedImage> = chunk.iter().collect();
        check_sizes(&refs, det.config.input_size)?;
        let raw = det.predict(&batch_images(chunk.iter().map(|im| &im.image))?)?;
        for dets in decode_predictions(&raw, &det.config) {
            let kept: Vec<Detection> = dets.into_iter().filter(|d| d.score >= SCORE_FLOOR).collect();
            out.push(nms(&kept, nms_iou));
        }
    }
    Ok(out)
}

pub fn ground_truth(images: &[AnnotatedImage]) -> Vec<Vec<Labeled>> {
    images.iter().map(|im| im.boxes.clone()).collect()
}

/// Per-epoch summary passed to the progress callback.
#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossParts,
    pub val: Option<LossParts>,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// On divergence, the last weights that produced a finite loss.
    pub detector: Detector,
    pub curves: Vec<CurveRow>,
    pub thresholds: ThresholdSet,
    /// Set when a non-finite loss or gradient stopped training early.
    pub diverged: Option<String>,
}

fn curve(epoch: usize, split: &str, p: &LossParts) -> CurveRow {
    CurveRow {
        epoch,
        split: split.into(),
        box_loss: p.box_loss,
        cls_loss: p.cls,
        dfl_loss: p.dfl,
    }
}

fn augmented(img: &AnnotatedImage, cfg: &TrainConfig, seed: u64) -> Result<AnnotatedImage> {
    if cfg.augment.is_empty() {
        return Ok(img.clone());
    }
    let out = apply_augmentations(img, &cfg.augment, seed)?;
    let size = cfg.detector.input_size as u32;
    Ok(fit_canvas(&out, size, size))
}

/// Trains a fresh detector. Epoch `e`'s train row is the mean loss over its
/// steps; its val row is measured after the epoch. The cosine schedule
/// steps once per optimizer update.
pub fn train_detector(
    train: &[AnnotatedImage],
    val: &[AnnotatedImage],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let anchors = fit_anchors(train, cfg, component_seed(seed, "anchors"))?;
    let mut det = Detector::new(cfg.detector.clone(), anchors, component_seed(seed, "init"))?;
    let mut state = OptState::new();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let sched = CosineSchedule {
        lr_max: cfg.optim.lr,
        lr_min: cfg.lr_min,
        total_steps: (cfg.epochs * steps_per_epoch) as u64,
    };
    sched.validate()?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(component_seed(seed, "shuffle"));
    let aug_seed = component_seed(seed, "augment");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curves = Vec::new();
    let mut diverged = None;
    // Weights that last produced a finite loss.
    let mut last_good = det.params.clone();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = LossParts::default();
        let mut lr = sched.lr_max;
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<AnnotatedImage> = batch
                .iter()
                .map(|&i| augmented(&train[i], cfg, aug_seed ^ ((epoch as u64) << 32 | i as u64)))
                .collect::<Result<_>>()?;
            let refs: Vec<&AnnotatedImage> = imgs.iter().collect();
            let step = batch_loss(&det, &refs, cfg, true).and_then(|(parts, grads)| {
                last_good.clone_from(&det.params);
                lr = cosine_lr(state.t, &sched);
                nadam_step(&mut det.params, &grads.expect("gradients requested"), &mut state, &cfg.optim, lr)?;
                Ok(parts)
            });
            match step {
                Ok(parts) => accumulate(&mut acc, &parts, batch.len() as f64 / train.len() as f64),
                Err(Error::NonFinite(what)) => {
                    det.params = last_good;
                    diverged = Some(format!("non-finite {what} in epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        curves.push(curve(epoch, "train", &acc));
        let val_parts = match val.is_empty() {
            true => None,
            false => match dataset_loss(&det, val, cfg) {
                Ok(v) => Some(v),
                Err(Error::NonFinite(what)) => {
                    det.params = last_good;
                    diverged = Some(format!("non-finite {what} on validation after epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            },
        };
        if let Some(v) = &val_parts {
            curves.push(curve(epoch, "val", v));
        }
        on_epoch(&EpochLog {
            epoch,
            train: acc,
            val: val_parts,
            lr,
        });
    }

    let thresholds = if val.is_empty() || diverged.is_some() {
        ThresholdSet::uniform(0.25, cfg.nms_iou)
    } else {
        let dets = detect_images(&det, val, cfg.nms_iou)?;
        calibrate_thresholds(&dets, &ground_truth(val), DEFAULT_MATCH_IOU, cfg.nms_iou)?
    };
    Ok(TrainOutcome {
        detector: det,
        curves,
        thresholds,
        diverged,
    })
}
